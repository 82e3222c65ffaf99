"""Optimization: AdamW, plateau scheduling, early stopping, folds and checkpoints."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import os
import shutil
import tempfile
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .data import class_prevalence, label_matrix, signal_matrix
from .errors import ConfigurationError, InputError, NumericHealthError
from .loss import LossConfig, class_weights_from_prevalence, total_loss
from .metrics import compute_metrics
from .model import CardioPatternFormer, predict_probs
from .numerics import Rng

log = logging.getLogger(__name__)


def _num(v) -> str:
    """Round-trippable text for a float, numpy scalar or not."""
    return repr(float(v))

CHECKPOINT_VERSION = 1
THRESHOLD_GRID = np.round(np.arange(0.01, 0.99 + 1e-9, 0.005), 10)


# ---------------------------------------------------------------------------
# optimizer

def adamw_step(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int,
               lr: float, wd: float, beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One AdamW update for step number ``t`` (1-based); returns new (theta, m, v).

    Weight decay shrinks theta directly and never enters the moments.
    """
    if not (theta.shape == grad.shape == m.shape == v.shape):
        raise InputError(f"adamw shapes disagree: {theta.shape} {grad.shape} {m.shape} {v.shape}")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    theta = theta - lr * wd * theta
    theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
    return theta, m, v


class AdamW:
    def __init__(self, named_params, lr: float = 5e-5, weight_decay: float = 0.01,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = dict(named_params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            p.data, self.m[k], self.v[k] = adamw_step(p.data, g, self.m[k], self.v[k], self.t,
                                                      self.lr, self.weight_decay, b1, b2, self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict:
        return {"t": self.t, "lr": self.lr,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.lr = float(state["lr"])
        self.m = {k: np.array(state["m"][k], dtype=np.float64) for k in self.params}
        self.v = {k: np.array(state["v"][k], dtype=np.float64) for k in self.params}


# ---------------------------------------------------------------------------
# schedule and stopping

class PlateauScheduler:
    """Multiply the lr by ``factor`` once ``patience`` epochs pass without improvement.

    Improvement means exceeding the best value so far by more than
    ``min_delta``. The counter resets after each reduction.
    """

    def __init__(self, factor: float = 0.2, patience: int = 3, min_delta: float = 1e-5):
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.counter = 0
        self.scale = 1.0

    def step(self, metric: float) -> bool:
        """Record one epoch; returns True when a reduction fires."""
        if metric > self.best + self.min_delta:
            self.best = metric
            self.counter = 0
            return False
        self.counter += 1
        if self.counter >= self.patience:
            self.scale *= self.factor
            self.counter = 0
            return True
        return False


def plateau_events(history, factor: float = 0.2, patience: int = 3, min_delta: float = 1e-5) -> list[int]:
    """1-based epochs after which the scheduler fires for a scripted metric history."""
    sched = PlateauScheduler(factor, patience, min_delta)
    return [i + 1 for i, f in enumerate(history) if sched.step(f)]


class EarlyStopping:
    def __init__(self, patience: int = 5, min_delta: float = 1e-5):
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.best_epoch = 0
        self.counter = 0

    def step(self, metric: float, epoch: int) -> bool:
        """Returns True when training should stop after this epoch."""
        if metric > self.best + self.min_delta:
            self.best = metric
            self.best_epoch = epoch
            self.counter = 0
            return False
        self.counter += 1
        return self.counter >= self.patience


# ---------------------------------------------------------------------------
# configuration and checkpoints

@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.01
    scheduler_factor: float = 0.2
    scheduler_patience: int = 3
    early_stop_patience: int = 5
    max_epochs: int = 30
    batch_size: int = 16
    grad_accum_steps: int = 2
    seed: int = 0
    min_delta: float = 1e-5
    # None -> focal defaults with inverse-prevalence class weights from the training split
    loss: LossConfig | None = None
    track_train_f1: bool = False

    def __post_init__(self):
        for name in ("scheduler_patience", "early_stop_patience", "max_epochs", "batch_size", "grad_accum_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigurationError("need lr > 0 and weight_decay >= 0")
        if not 0.0 < self.scheduler_factor < 1.0:
            raise ConfigurationError("scheduler_factor must be in (0, 1)")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum_steps

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self) if f.name != "loss"}
        d["loss"] = None if self.loss is None else self.loss.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        loss = d.pop("loss", None)
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(loss=None if loss is None else LossConfig.from_dict(loss),
                   **{k: v for k, v in d.items() if k in names})


# learning rate and epochs that make the desk profile converge on the toy corpus
DESK_TRAIN = dict(lr=1e-3, max_epochs=30)


def train_config(profile_name: str = "paper", **overrides) -> TrainConfig:
    base = DESK_TRAIN if profile_name in ("desk", "micro") else {}
    return TrainConfig(**{**base, **overrides})


@dataclass
class Checkpoint:
    params: dict
    model_config: dict
    train_config: dict
    epoch: int = 0
    best_val_f1: float = float("nan")
    thresholds: np.ndarray = field(default_factory=lambda: np.full(6, 0.5))
    optimizer: dict | None = None
    version: int = CHECKPOINT_VERSION

    def config_hash(self) -> str:
        blob = json.dumps({"model": self.model_config, "train": self.train_config}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def build_model(self) -> CardioPatternFormer:
        model = CardioPatternFormer(ModelConfig.from_dict(self.model_config), Rng(0))
        model.load_state_dict(self.params)
        return model.eval()


def make_checkpoint(model: CardioPatternFormer, tcfg: TrainConfig, epoch: int, best_f1: float,
                    thresholds=None, opt: AdamW | None = None) -> Checkpoint:
    th = np.full(model.cfg.n_classes, 0.5) if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    return Checkpoint(model.state_dict(), model.cfg.to_dict(), tcfg.to_dict(), epoch, float(best_f1),
                      th, None if opt is None else opt.state_dict())


def _safe_name(name: str) -> str:
    return name.replace("/", "_")


def save_checkpoint(ckpt: Checkpoint, directory) -> Path:
    """Write ``params/*.bin`` + ``manifest.json`` into a temp dir, then rename into place."""
    target = Path(directory)
    target.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=target.parent))
    try:
        (tmp / "params").mkdir()
        for name, arr in ckpt.params.items():
            nx.save_array(tmp / "params" / f"{_safe_name(name)}.bin", arr, name)
        opt_meta = None
        if ckpt.optimizer is not None:
            (tmp / "optimizer").mkdir()
            for name in ckpt.params:
                nx.save_array(tmp / "optimizer" / f"{_safe_name(name)}.m.bin", ckpt.optimizer["m"][name], name)
                nx.save_array(tmp / "optimizer" / f"{_safe_name(name)}.v.bin", ckpt.optimizer["v"][name], name)
            opt_meta = {"t": ckpt.optimizer["t"], "lr": ckpt.optimizer["lr"]}
        manifest = {
            "version": ckpt.version,
            "names": list(ckpt.params),
            "shapes": {k: list(np.shape(v)) for k, v in ckpt.params.items()},
            "epoch": ckpt.epoch,
            "best_val_f1": ckpt.best_val_f1,
            "thresholds": np.asarray(ckpt.thresholds).tolist(),
            "config_hash": ckpt.config_hash(),
            "model_config": ckpt.model_config,
            "train_config": ckpt.train_config,
            "optimizer": opt_meta,
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
        if target.exists():
            old = target.with_name(target.name + ".old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(target, old)
            os.replace(tmp, target)
            shutil.rmtree(old)
        else:
            os.replace(tmp, target)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return target


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.exists():
        raise InputError(f"{d}: no manifest.json (not a checkpoint directory)")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise InputError(f"{d}: unsupported checkpoint version {manifest.get('version')}")
    params = {}
    for name in manifest["names"]:
        arr = nx.load_array(d / "params" / f"{_safe_name(name)}.bin")
        if list(arr.shape) != manifest["shapes"][name]:
            raise InputError(f"{d}: parameter {name} has shape {arr.shape}, manifest says {manifest['shapes'][name]}")
        params[name] = arr
    opt = None
    if manifest.get("optimizer") is not None:
        opt = dict(manifest["optimizer"])
        opt["m"] = {n: nx.load_array(d / "optimizer" / f"{_safe_name(n)}.m.bin") for n in manifest["names"]}
        opt["v"] = {n: nx.load_array(d / "optimizer" / f"{_safe_name(n)}.v.bin") for n in manifest["names"]}
    ckpt = Checkpoint(params, manifest["model_config"], manifest["train_config"], manifest["epoch"],
                      manifest["best_val_f1"], np.asarray(manifest["thresholds"], dtype=np.float64), opt,
                      manifest["version"])
    if ckpt.config_hash() != manifest["config_hash"]:
        raise InputError(f"{d}: config hash mismatch (manifest edited?)")
    return ckpt


# ---------------------------------------------------------------------------
# thresholds

def select_thresholds(probs, targets, grid=THRESHOLD_GRID) -> np.ndarray:
    """Per-class threshold on ``grid`` maximizing F1 of ``prob >= t``.

    Ties go to the threshold nearest 0.5, then to the smaller one. A class
    without positives keeps 0.5.
    """
    probs = np.asarray(probs, dtype=np.float64)
    targets = np.asarray(targets).astype(bool)
    if probs.ndim != 2 or probs.shape != targets.shape or probs.shape[0] < 1:
        raise InputError(f"need matching non-empty [N, C] probs/targets, got {probs.shape} and {targets.shape}")
    grid = np.asarray(grid, dtype=np.float64)
    out = np.full(probs.shape[1], 0.5)
    for c in range(probs.shape[1]):
        y = targets[:, c]
        if not y.any():
            warnings.warn(f"class {c} has no positives in the validation set; threshold stays 0.5")
            continue
        pred = probs[:, c][None, :] >= grid[:, None]  # [G, N]
        tp = (pred & y).sum(axis=1)
        fp = (pred & ~y).sum(axis=1)
        fn = (~pred & y).sum(axis=1)
        denom = 2 * tp + fp + fn
        f1 = np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)
        best = np.flatnonzero(f1 == f1.max())
        # lexicographic: distance to 0.5, then the threshold itself
        out[c] = grid[min(best, key=lambda i: (round(abs(grid[i] - 0.5), 10), grid[i]))]
    return out


# ---------------------------------------------------------------------------
# training loop

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_f1: float
    lr: float
    train_f1: float | None = None
    seconds: float = 0.0


@dataclass
class FoldResult:
    checkpoint: Checkpoint
    log: list
    model: CardioPatternFormer
    val_report: object = None
    stopped_early: bool = False


def write_epoch_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_f1", "lr", "train_f1"])
        for r in rows:
            w.writerow([r.epoch, _num(r.train_loss), _num(r.val_f1), _num(r.lr),
                        "" if r.train_f1 is None else _num(r.train_f1)])


def resolve_loss_config(tcfg: TrainConfig, train_labels: np.ndarray) -> LossConfig:
    if tcfg.loss is not None:
        return tcfg.loss
    return LossConfig(class_weights=class_weights_from_prevalence(class_prevalence(train_labels)))


def accumulate_gradients(model: CardioPatternFormer, x: np.ndarray, y: np.ndarray, lcfg: LossConfig,
                         scale: float, rng: Rng | None = None) -> float:
    """Forward + backward one micro-batch with the loss multiplied by ``scale``.

    Gradients add onto whatever the parameters already hold. Returns the
    unscaled loss value.
    """
    out = model(x, rng=rng)
    loss = total_loss(out, y, lcfg)
    value = loss.item()
    if not np.isfinite(value):
        raise NumericHealthError(f"non-finite training loss {value}")
    nx.backward(nx.mul(loss, scale))
    return value


def train_epoch(model, opt: AdamW, signals, labels, lcfg: LossConfig, tcfg: TrainConfig,
                order: np.ndarray, rng: Rng | None) -> float:
    """One pass in shuffled ``order``; every ``grad_accum_steps`` micro-batches make one step.

    A short final group is scaled by its own length so each step sees a
    mean-reduced loss.
    """
    model.train()
    bs, acc = tcfg.batch_size, tcfg.grad_accum_steps
    batches = [order[s:s + bs] for s in range(0, len(order), bs)]
    losses = []
    for g in range(0, len(batches), acc):
        group = batches[g:g + acc]
        opt.zero_grad()
        for idx in group:
            losses.append(accumulate_gradients(model, signals[idx], labels[idx], lcfg, 1.0 / len(group), rng))
        opt.step()
    return float(np.mean(losses))


def train_fold(train_records, val_records, model_cfg: ModelConfig, tcfg: TrainConfig,
               log_path=None, checkpoint_dir=None, verbose: bool = False) -> FoldResult:
    if not train_records or not val_records:
        raise InputError("train and validation splits must be nonempty")
    x_tr, y_tr = signal_matrix(train_records), label_matrix(train_records)
    x_va, y_va = signal_matrix(val_records), label_matrix(val_records)
    lcfg = resolve_loss_config(tcfg, y_tr)

    root = Rng(tcfg.seed)
    model = CardioPatternFormer(model_cfg, root.spawn(0))
    shuffle_rng, dropout_rng = root.spawn(1), root.spawn(2)
    opt = AdamW(model.named_parameters(), tcfg.lr, tcfg.weight_decay)
    sched = PlateauScheduler(tcfg.scheduler_factor, tcfg.scheduler_patience, tcfg.min_delta)
    stopper = EarlyStopping(tcfg.early_stop_patience, tcfg.min_delta)

    best = make_checkpoint(model, tcfg, 0, -np.inf, opt=opt)
    rows: list[EpochLog] = []
    stopped = False
    for epoch in range(1, tcfg.max_epochs + 1):
        t0 = time.perf_counter()
        order = shuffle_rng.permutation(len(train_records))
        try:
            loss = train_epoch(model, opt, x_tr, y_tr, lcfg, tcfg, order, dropout_rng)
        except NumericHealthError as exc:
            raise NumericHealthError(f"epoch {epoch}: {exc}", checkpoint=best) from None
        val_f1 = compute_metrics(predict_probs(model, x_va), y_va).macro_f1
        train_f1 = compute_metrics(predict_probs(model, x_tr), y_tr).macro_f1 if tcfg.track_train_f1 else None
        row = EpochLog(epoch, loss, val_f1, opt.lr, train_f1, time.perf_counter() - t0)
        rows.append(row)
        if verbose:
            extra = "" if train_f1 is None else f" train_f1={train_f1:.4f}"
            log.info("epoch %d loss=%.5f val_f1=%.4f lr=%.2e%s", epoch, loss, val_f1, opt.lr, extra)
        stop = stopper.step(val_f1, epoch)
        if stopper.best_epoch == epoch:
            best = make_checkpoint(model, tcfg, epoch, val_f1, opt=opt)
        if sched.step(val_f1):
            opt.lr *= tcfg.scheduler_factor
        if stop:
            stopped = True
            break

    model.load_state_dict(best.params)
    model.eval()
    val_probs = predict_probs(model, x_va)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        best.thresholds = select_thresholds(val_probs, y_va)
    report = compute_metrics(val_probs, y_va, best.thresholds)
    if log_path is not None:
        write_epoch_log(log_path, rows)
    if checkpoint_dir is not None:
        save_checkpoint(best, checkpoint_dir)
    return FoldResult(best, rows, model, report, stopped)


@dataclass
class CrossValResult:
    folds: list
    summary: dict
    best_fold: int

    @property
    def best(self) -> FoldResult:
        return self.folds[self.best_fold]


def cross_validate(records, splits, model_cfg: ModelConfig, tcfg: TrainConfig, out_dir=None,
                   verbose: bool = False) -> CrossValResult:
    """``train_fold`` on each fold of ``splits``; summarizes val metrics as mean and std."""
    seen: set = set()
    for _, val in splits.folds:
        if seen & set(val):
            raise InputError("validation folds overlap")
        seen |= set(val)
    folds = []
    for k, (tr, va) in enumerate(splits.folds):
        fold_cfg = dataclasses.replace(tcfg, seed=tcfg.seed + k)
        fdir = None if out_dir is None else Path(out_dir) / f"fold{k}"
        if fdir is not None:
            fdir.mkdir(parents=True, exist_ok=True)
        res = train_fold([records[i] for i in tr], [records[i] for i in va], model_cfg, fold_cfg,
                         log_path=None if fdir is None else fdir / "epochs.csv",
                         checkpoint_dir=None if fdir is None else fdir / "checkpoint", verbose=verbose)
        folds.append(res)
        if verbose:
            log.info("fold %d best epoch %d val_f1=%.4f", k, res.checkpoint.epoch, res.checkpoint.best_val_f1)
    f1 = np.array([r.checkpoint.best_val_f1 for r in folds])
    tuned = np.array([r.val_report.macro_f1 for r in folds])
    best_fold = int(np.argmax(f1))
    summary = {
        "n_folds": len(folds),
        "val_macro_f1_mean": float(f1.mean()), "val_macro_f1_std": float(f1.std()),
        "val_macro_f1_tuned_mean": float(tuned.mean()), "val_macro_f1_tuned_std": float(tuned.std()),
        "best_fold": best_fold, "best_val_macro_f1": float(f1[best_fold]),
        "per_fold": f1.tolist(),
    }
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "cv_summary.json").write_text(json.dumps(summary, indent=2))
        save_checkpoint(folds[best_fold].checkpoint, Path(out_dir) / "best")
    return CrossValResult(folds, summary, best_fold)
