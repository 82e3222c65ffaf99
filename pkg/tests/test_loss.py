import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpformer import numerics as nx
from cpformer.errors import ConfigurationError, InputError
from cpformer.heads import ModelOutput
from cpformer.loss import (LossConfig, attention_diversity_loss, class_weights_from_prevalence,
                           default_cooccurrence, focal_loss, total_loss, uncertainty_calibration)
from cpformer.numerics import Tensor


def logit(p):
    return np.log(p / (1 - p))


def focal_value(z, y, cfg):
    return focal_loss(Tensor(np.asarray(z, dtype=float)), np.asarray(y, dtype=float), cfg).item()


def test_focal_equals_half_bce_when_gamma_zero():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(16, 6)) * 3
    y = (rng.uniform(size=(16, 6)) < 0.4).astype(float)
    cfg = LossConfig(gamma=0.0, alpha=0.5)
    p = np.clip(1 / (1 + np.exp(-z)), 1e-7, 1 - 1e-7)
    bce = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    assert abs(focal_value(z, y, cfg) - 0.5 * bce) < 1e-12


def test_focal_hand_value():
    # 0.5 * (1 - 0.5)^2 * ln 2 = 0.0866434
    cfg = LossConfig(gamma=2.0, alpha=0.5, class_weights=np.ones(1), cooccur_matrix=np.zeros((1, 1)))
    assert abs(focal_value([[0.0]], [[1.0]], cfg) - 0.0866434) < 1e-6
    assert abs(focal_value([[0.0]], [[1.0]], cfg) - 0.125 * np.log(2)) < 1e-15


def test_focusing_downweights_easy_examples():
    cfg1 = LossConfig(gamma=0.0, class_weights=np.ones(1), cooccur_matrix=np.zeros((1, 1)))
    cfg2 = LossConfig(gamma=2.0, class_weights=np.ones(1), cooccur_matrix=np.zeros((1, 1)))
    easy, hard = [[logit(0.9)]], [[logit(0.1)]]
    ratio_easy = focal_value(easy, [[1]], cfg2) / focal_value(easy, [[1]], cfg1)
    ratio_hard = focal_value(hard, [[1]], cfg2) / focal_value(hard, [[1]], cfg1)
    assert ratio_easy == pytest.approx(0.01) and ratio_hard == pytest.approx(0.81)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 0.99), st.sampled_from([0.0, 1.0]))
def test_focal_monotone_decreasing_in_gamma(p, y):
    one = dict(class_weights=np.ones(1), cooccur_matrix=np.zeros((1, 1)))
    vals = [focal_value([[logit(p)]], [[y]], LossConfig(gamma=g, **one)) for g in (0.0, 0.5, 1.0, 2.0, 3.0)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))


def test_focal_gradient_closed_form():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(5, 6)) * 2
    y = (rng.uniform(size=(5, 6)) < 0.5).astype(float)
    cw = rng.uniform(0.5, 2.0, size=6)
    cfg = LossConfig(gamma=2.0, alpha=0.25, class_weights=cw)
    zt = nx.parameter(z)
    nx.backward(focal_loss(zt, y, cfg))
    p = 1 / (1 + np.exp(-z))
    g_pos = cfg.alpha * (1 - p) ** 2 * (2 * p * np.log(p) - (1 - p))
    g_neg = (1 - cfg.alpha) * p ** 2 * (p - 2 * (1 - p) * np.log(1 - p))
    expected = cw * (y * g_pos + (1 - y) * g_neg) / z.size
    assert np.abs(zt.grad - expected).max() < 1e-14


def test_cooccurrence_prior():
    m = default_cooccurrence(6)
    assert m[0, 1] == m[1, 0] == 1 and m.sum() == 2
    z = np.array([[logit(0.8), logit(0.6), 0, 0, 0, 0]])
    y = np.zeros((1, 6))
    base = focal_value(z, y, LossConfig())
    with_prior = focal_value(z, y, LossConfig(cooccur_weight=0.5))
    assert with_prior - base == pytest.approx(0.5 * 2 * 0.8 * 0.6, abs=1e-12)


def test_class_weights_from_prevalence():
    assert np.allclose(class_weights_from_prevalence([0.5, 0.25]), [2 / 3, 4 / 3])
    w = class_weights_from_prevalence([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    assert w.mean() == pytest.approx(1.0) and np.all(np.diff(w) < 0)
    with pytest.raises(ConfigurationError):
        class_weights_from_prevalence([0.5, 0.0])


def test_loss_config_validation():
    with pytest.raises(ConfigurationError):
        LossConfig(gamma=-1)
    with pytest.raises(ConfigurationError):
        LossConfig(alpha=1.0)
    with pytest.raises(ConfigurationError):
        LossConfig(cooccur_matrix=np.eye(6))
    with pytest.raises(ConfigurationError):
        focal_loss(Tensor(np.zeros((1, 6))), np.zeros((1, 6)), LossConfig(class_weights=np.ones(5)))
    with pytest.raises(InputError):
        focal_loss(Tensor(np.zeros((1, 6))), np.full((1, 6), 0.5), LossConfig())
    with pytest.raises(InputError):
        focal_loss(Tensor(np.zeros((2, 6))), np.zeros((1, 6)), LossConfig())
    cfg = LossConfig(class_weights=np.arange(1.0, 7.0), cooccur_weight=0.2)
    again = LossConfig.from_dict(cfg.to_dict())
    assert np.array_equal(again.class_weights, cfg.class_weights) and again.cooccur_weight == 0.2


def test_focal_finite_at_extreme_logits():
    z = Tensor(np.array([[1e4, -1e4, 50.0, -50.0, 0.0, 0.0]]))
    val = focal_loss(z, np.array([[0, 1, 1, 0, 1, 0]]), LossConfig()).item()
    assert np.isfinite(val) and val > 0


# -------------------------------------------------------------- diversity

def diversity(maps):
    return attention_diversity_loss(Tensor(np.asarray(maps, dtype=float))).item()


def test_diversity_extremes():
    assert diversity(np.eye(6)[None]) == 0.0
    same = np.tile(np.random.default_rng(2).uniform(size=10), (6, 1))[None]
    assert diversity(same) == pytest.approx(1.0, abs=1e-12)


def test_diversity_matches_loop_oracle():
    maps = np.random.default_rng(3).uniform(size=(4, 6, 13))
    total = 0.0
    for m in maps:
        for i in range(6):
            for j in range(i + 1, 6):
                total += m[i] @ m[j] / np.linalg.norm(m[i]) / np.linalg.norm(m[j])
    assert abs(diversity(maps) - total / (4 * 15)) < 1e-10


# ----------------------------------------------------------------- totals

def _output(b=3, c=6, t=5, seed=4):
    rng = np.random.default_rng(seed)
    maps = rng.uniform(size=(b, c, t))
    maps /= maps.sum(-1, keepdims=True)
    logits = rng.normal(size=(b, c))
    return ModelOutput(Tensor(logits), Tensor(logits), Tensor(logits), Tensor(maps),
                       Tensor(rng.uniform(size=(b, t))), Tensor(rng.uniform(size=(b, c))))


def test_total_loss_arithmetic():
    out = _output()
    y = (np.random.default_rng(5).uniform(size=(3, 6)) < 0.5).astype(float)
    cfg = LossConfig(diversity_weight=0.3, uncertainty_weight=0.7, cooccur_weight=0.1)
    expect = (focal_loss(out.logits, y, cfg).item()
              + 0.3 * attention_diversity_loss(out.explanation_maps).item()
              + 0.7 * uncertainty_calibration(out, y).item())
    assert total_loss(out, y, cfg).item() == pytest.approx(expect, abs=1e-14)
    plain = LossConfig(diversity_weight=0.0)
    assert total_loss(out, y, plain).item() == focal_loss(out.logits, y, plain).item()


def test_uncertainty_calibration_oracle():
    out = _output(seed=6)
    y = np.ones((3, 6))
    err = np.abs(y - 1 / (1 + np.exp(-out.logits.data)))
    ref = np.mean(np.sum((out.uncertainty.data - err) ** 2, axis=-1))
    assert uncertainty_calibration(out, y).item() == pytest.approx(ref, abs=1e-14)
