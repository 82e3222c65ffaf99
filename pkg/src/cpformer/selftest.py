"""Finite-difference gradient suite and the invariant battery behind ``cpformer selftest``."""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import PhysioAttention
from .config import profile
from .heads import AdaptiveDiagnosticPooling, DiagnosticFusion, ExplainableDiagnosticHead
from .loss import LossConfig, attention_diversity_loss, focal_loss, total_loss
from .model import CardioPatternFormer
from .numerics import GradCheckReport, Rng, Tensor, grad_check
from .temporal import MultiResolutionTemporalEncoding
from .tokenizer import PatternTokenizer

H = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _p(rng: Rng, *shape, scale: float = 1.0, name: str | None = None) -> Tensor:
    return nx.parameter(rng.normal(size=shape, std=scale), name)


def _away_from(rng: Rng, shape, kinks, gap: float = 0.05) -> Tensor:
    """Random values at least ``gap`` away from every point in ``kinks``."""
    x = rng.normal(size=shape)
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] = k + np.where(x[near] >= k, gap, -gap) * 2
    return nx.parameter(x)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    """Scalarize with fixed random weights so every output element carries a distinct gradient."""
    return nx.tsum(nx.mul(out, w))


def op_cases(seed: int = 0) -> dict:
    """name -> (f, inputs) for every differentiable primitive."""
    rng = Rng(seed)
    cases = {}

    def case(name, fn, *inputs):
        out_shape = fn(*inputs).shape
        w = rng.normal(size=out_shape)
        cases[name] = (lambda: _weighted(fn(*inputs), w), list(inputs))

    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    row = _p(rng, 4)
    case("add", nx.add, a, b)
    case("add_suffix", nx.add, _p(rng, 2, 3, 4), row)
    case("sub", nx.sub, _p(rng, 3, 4), _p(rng, 4))
    case("mul", nx.mul, _p(rng, 2, 3, 4), _p(rng, 3, 4))
    case("mul_scalar", nx.mul, _p(rng, 3, 4), nx.parameter(rng.normal()))
    pos = nx.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    case("div", nx.div, _p(rng, 3, 4), pos)
    case("exp", nx.exp, _p(rng, 3, 4))
    case("log", nx.log, nx.parameter(rng.uniform(0.5, 2.0, size=(3, 4))))
    case("power", lambda x: nx.power(x, 2.5), nx.parameter(rng.uniform(0.5, 2.0, size=(3, 4))))
    case("sqrt", nx.sqrt, nx.parameter(rng.uniform(0.5, 2.0, size=(3, 4))))
    case("sigmoid", nx.sigmoid, _p(rng, 3, 4, scale=3.0))
    case("tanh", nx.tanh, _p(rng, 3, 4))
    case("gelu", nx.gelu, _p(rng, 3, 4, scale=2.0))
    case("relu", nx.relu, _away_from(rng, (3, 4), [0.0]))
    case("clamp", lambda x: nx.clamp(x, -0.5, 0.5), _away_from(rng, (3, 4), [-0.5, 0.5]))
    case("dropout", lambda x: nx.dropout(x, 0.3, Rng(5), True), _p(rng, 3, 4))
    case("sum_axis", lambda x: nx.tsum(x, axis=1, keepdims=True), _p(rng, 2, 3, 4))
    case("mean", lambda x: nx.mean(x, axis=(0, 2)), _p(rng, 2, 3, 4))
    case("reshape", lambda x: nx.reshape(x, (4, 6)), _p(rng, 2, 3, 4))
    case("transpose", lambda x: nx.transpose(x, (2, 0, 1)), _p(rng, 2, 3, 4))
    case("swapaxes", lambda x: nx.swapaxes(x, 0, 2), _p(rng, 2, 3, 4))
    case("broadcast_to", lambda x: nx.broadcast_to(x, (2, 3, 4)), _p(rng, 3, 1))
    case("concat", lambda x, y: nx.concat([x, y], axis=1), _p(rng, 2, 3), _p(rng, 2, 2))
    case("stack", lambda x, y: nx.stack([x, y], axis=0), _p(rng, 2, 3), _p(rng, 2, 3))
    case("getitem", lambda x: nx.getitem(x, (slice(None), [0, 2, 2])), _p(rng, 3, 4))
    case("matmul", nx.matmul, _p(rng, 2, 3, 4), _p(rng, 2, 4, 5))
    case("linear", nx.linear, _p(rng, 2, 3, 4), _p(rng, 5, 4), _p(rng, 5))
    case("conv1d", nx.conv1d, _p(rng, 2, 3, 11), _p(rng, 4, 3, 5), _p(rng, 4))
    case("avg_pool1d", lambda x: nx.avg_pool1d(x, 4), _p(rng, 2, 3, 10))
    case("softmax", lambda x: nx.softmax(x, axis=-1), _p(rng, 2, 3, 5))
    case("layernorm", nx.layernorm, _p(rng, 2, 3, 6), _p(rng, 6), _p(rng, 6))
    case("interpolate", lambda x: nx.linear_interpolate_1d(x, 7), _p(rng, 2, 3, 4))
    return cases


def module_cases(seed: int = 0) -> dict:
    """Composite blocks at micro scale, checked with respect to inputs and all parameters."""
    cfg = profile("micro")
    rng = Rng(seed)
    cases = {}
    b, t, d = 2, cfg.max_seq_len, cfg.d_model

    tok = PatternTokenizer(cfg, rng)
    x_sig = _p(rng, b, 12, cfg.signal_length)
    w_tok = rng.normal(size=(b, t, d))
    cases["tokenizer"] = (lambda: _weighted(tok(x_sig), w_tok), [x_sig] + tok.parameters())

    temporal = MultiResolutionTemporalEncoding(cfg, rng)
    x_tok = _p(rng, b, t, d)
    w_t = rng.normal(size=(b, t, d))
    cases["temporal"] = (lambda: _weighted(temporal(x_tok), w_t), [x_tok] + temporal.parameters())

    attn = PhysioAttention(cfg, rng)
    for p in attn.strengths().values():
        p.data = rng.uniform(0.3, 1.0, size=p.shape)
    x_att = _p(rng, b, t, d)
    w_a = rng.normal(size=(b, t, d))
    cases["physio_attention"] = (lambda: _weighted(attn(x_att), w_a), [x_att] + attn.parameters())

    ex = ExplainableDiagnosticHead(cfg, rng)
    ad = AdaptiveDiagnosticPooling(cfg, rng)
    fu = DiagnosticFusion()
    fu.alpha_explain.data = np.array(0.3)
    h = _p(rng, b, t, d)
    w_h = rng.normal(size=(b, cfg.n_classes))

    def heads():
        l1, maps = ex(h)
        l2, rel, unc = ad(h)
        return _weighted(fu(l1, l2), w_h) + nx.tsum(nx.mul(maps, 0.3)) + nx.tsum(nx.mul(unc, 0.7))
    cases["heads"] = (heads, [h] + ex.parameters() + ad.parameters() + fu.parameters())

    logits = _p(rng, 3, cfg.n_classes, scale=2.0)
    y = (rng.uniform(size=(3, cfg.n_classes)) < 0.5).astype(float)
    lc = LossConfig(class_weights=rng.uniform(0.5, 2.0, cfg.n_classes), cooccur_weight=0.5)
    cases["focal_loss"] = (lambda: focal_loss(logits, y, lc), [logits])
    maps = nx.parameter(rng.uniform(0.1, 1.0, size=(2, cfg.n_classes, t)))
    cases["diversity_loss"] = (lambda: attention_diversity_loss(maps), [maps])
    return cases


def model_case(seed: int = 0):
    """Full micro model (d=8, H=2, 2 layers, T=12, batch 2) with the complete training loss."""
    cfg = profile("micro")
    rng = Rng(seed)
    model = CardioPatternFormer(cfg, rng)
    for layer in model.encoder.layers:
        for p in layer.attn.strengths().values():
            p.data = rng.uniform(0.2, 0.6, size=p.shape)
    model.fusion.alpha_explain.data = np.array(0.2)
    x = nx.parameter(rng.normal(size=(2, 12, cfg.signal_length)))
    y = np.array([[1, 0, 1, 0, 0, 1], [0, 1, 0, 1, 1, 0]], dtype=float)
    lc = LossConfig(class_weights=np.linspace(0.5, 1.5, 6), cooccur_weight=0.3, diversity_weight=0.1,
                    uncertainty_weight=0.2)
    model.train()
    return (lambda: total_loss(model(x), y, lc)), [x] + model.parameters(), model


def _run(name: str, f, inputs, max_elements=None) -> tuple[CheckResult, GradCheckReport]:
    t0 = time.perf_counter()
    rep = grad_check(f, inputs, h=H, tol=TOL, max_elements=max_elements, rng=Rng(1))
    return CheckResult(f"grad:{name}", rep.passed, str(rep), time.perf_counter() - t0), rep


def gradient_suite(include_model: bool = True, max_elements: int | None = None, seed: int = 0) -> list[CheckResult]:
    out = []
    for name, (f, inputs) in {**op_cases(seed), **module_cases(seed)}.items():
        out.append(_run(name, f, inputs, max_elements)[0])
    if include_model:
        f, inputs, _ = model_case(seed)
        out.append(_run("full_model", f, inputs, max_elements)[0])
    return out


# ---------------------------------------------------------------------------
# invariants

def _check(name, fn) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
    except Exception as exc:  # a crash is a failed check, reported not raised
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


def _softmax_rows():
    rng = Rng(3)
    x = nx.Tensor(rng.normal(size=(4, 7, 9), std=20.0))
    err = np.abs(nx.softmax(x).data.sum(-1) - 1).max()
    return err < 1e-9, f"max row error {err:.1e}"


def _model_structure():
    cfg = profile("micro")
    model = CardioPatternFormer(cfg, Rng(4)).eval()
    x = Rng(5).normal(size=(3, 12, cfg.signal_length))
    with nx.no_grad():
        out = model(x)
    maps_err = np.abs(out.explanation_maps.data.sum(-1) - 1).max()
    lo = np.minimum(out.logits_explain.data, out.logits_adaptive.data)
    hi = np.maximum(out.logits_explain.data, out.logits_adaptive.data)
    between = np.all(out.logits.data >= lo - 1e-12) and np.all(out.logits.data <= hi + 1e-12)
    return maps_err < 1e-9 and between, f"map row error {maps_err:.1e}, fused between heads: {between}"


def _temporal_additive():
    cfg = profile("micro")
    enc = MultiResolutionTemporalEncoding(cfg, Rng(6))
    rng = Rng(7)
    a, b = rng.normal(size=(2, 9, cfg.d_model)), rng.normal(size=(2, 9, cfg.d_model))
    with nx.no_grad():
        da = enc(nx.Tensor(a)).data - a
        db = enc(nx.Tensor(b)).data - b
    return da.shape == a.shape and np.abs(da - db).max() < 1e-12, "output - input independent of input"


def _zero_bias_reduction():
    cfg = profile("micro")
    attn = PhysioAttention(cfg, Rng(8))
    attn.set_strengths(0.0)
    x = Rng(9).normal(size=(2, cfg.max_seq_len, cfg.d_model))
    with nx.no_grad():
        got = attn(nx.Tensor(x)).data
    ref = vanilla_mha(x, attn.w_q.data, attn.w_k.data, attn.w_v.data, attn.w_o.data, cfg.n_heads)
    err = np.abs(got - ref).max()
    return err < 1e-10, f"max abs diff {err:.1e}"


def vanilla_mha(x, wq, wk, wv, wo, n_heads):
    """Plain multi-head attention with explicit per-head loops."""
    b, t, d = x.shape
    hd = d // n_heads
    out = np.zeros((b, t, d))
    for i in range(b):
        q, k, v = x[i] @ wq.T, x[i] @ wk.T, x[i] @ wv.T
        heads = []
        for h in range(n_heads):
            sl = slice(h * hd, (h + 1) * hd)
            s = q[:, sl] @ k[:, sl].T / math.sqrt(hd)
            s = np.exp(s - s.max(axis=1, keepdims=True))
            heads.append((s / s.sum(axis=1, keepdims=True)) @ v[:, sl])
        out[i] = np.concatenate(heads, axis=1) @ wo.T
    return out


def _checkpoint_roundtrip():
    from .train import TrainConfig, load_checkpoint, make_checkpoint, save_checkpoint
    cfg = profile("micro")
    model = CardioPatternFormer(cfg, Rng(10)).eval()
    x = Rng(11).normal(size=(2, 12, cfg.signal_length))
    with nx.no_grad():
        before = model(x).logits.data
    with tempfile.TemporaryDirectory() as d:
        save_checkpoint(make_checkpoint(model, TrainConfig(), 1, 0.5), f"{d}/ckpt")
        clone = load_checkpoint(f"{d}/ckpt").build_model()
    with nx.no_grad():
        after = clone(x).logits.data
    return np.array_equal(before, after), "logits bitwise equal after reload"


def _loss_identities():
    z = Rng(12).normal(size=(4, 6))
    y = (Rng(13).uniform(size=(4, 6)) < 0.5).astype(float)
    lc = LossConfig(gamma=0.0, alpha=0.5, diversity_weight=0.0)
    focal = focal_loss(nx.Tensor(z), y, lc).item()
    p = np.clip(1 / (1 + np.exp(-z)), 1e-7, 1 - 1e-7)
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    return abs(focal - 0.5 * bce) < 1e-12, f"|focal - bce/2| = {abs(focal - 0.5 * bce):.1e}"


def _metrics_perfect():
    from .metrics import compute_metrics
    y = (Rng(14).uniform(size=(20, 6)) < 0.5).astype(float)
    y[0], y[1] = 1, 0
    rep = compute_metrics(y, y)
    comp = compute_metrics(1 - y, y)
    ok = rep.hamming_accuracy == 1 and rep.macro_f1 == 1 and comp.hamming_accuracy == 0
    return ok, f"perfect hamming {rep.hamming_accuracy}, complemented {comp.hamming_accuracy}"


INVARIANTS = {
    "softmax_rows": _softmax_rows,
    "model_structure": _model_structure,
    "temporal_additive": _temporal_additive,
    "zero_bias_reduction": _zero_bias_reduction,
    "checkpoint_roundtrip": _checkpoint_roundtrip,
    "loss_identities": _loss_identities,
    "metrics_perfect": _metrics_perfect,
}


def invariant_battery() -> list[CheckResult]:
    return [_check(name, fn) for name, fn in INVARIANTS.items()]


def run_selftest(include_model_gradcheck: bool = True, echo=print) -> bool:
    results = invariant_battery()
    for r in results:
        echo(r.line())
    for r in gradient_suite(include_model=include_model_gradcheck):
        echo(r.line())
        results.append(r)
    ok = all(r.passed for r in results)
    echo(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return ok
