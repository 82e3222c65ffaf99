"""Class-weighted multi-label focal loss and the attention diversity penalty."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, InputError
from .heads import ModelOutput
from .numerics import Tensor

P_CLAMP = 1e-7


def default_cooccurrence(n_classes: int = 6) -> np.ndarray:
    """Incompatible pairs get 1: sinus bradycardia vs sinus rhythm/tachycardia."""
    m = np.zeros((n_classes, n_classes))
    if n_classes >= 2:
        m[0, 1] = m[1, 0] = 1.0
    return m


@dataclass
class LossConfig:
    alpha: float = 0.5
    gamma: float = 2.0
    class_weights: np.ndarray = field(default_factory=lambda: np.ones(6))
    cooccur_weight: float = 0.0
    cooccur_matrix: np.ndarray = field(default_factory=default_cooccurrence)
    diversity_weight: float = 0.01
    # optional calibration term for the uncertainty head; off by default
    uncertainty_weight: float = 0.0

    def __post_init__(self):
        self.class_weights = np.asarray(self.class_weights, dtype=np.float64)
        self.cooccur_matrix = np.asarray(self.cooccur_matrix, dtype=np.float64)
        if self.gamma < 0:
            raise ConfigurationError(f"gamma must be >= 0, got {self.gamma}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must be in (0, 1), got {self.alpha}")
        if np.any(self.class_weights <= 0):
            raise ConfigurationError("class weights must be positive")
        m = self.cooccur_matrix
        if m.shape[0] != m.shape[1] or not np.allclose(m, m.T) or np.any(np.diag(m) != 0):
            raise ConfigurationError("co-occurrence matrix must be square, symmetric, zero-diagonal")
        for name in ("cooccur_weight", "diversity_weight", "uncertainty_weight"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha, "gamma": self.gamma,
            "class_weights": self.class_weights.tolist(),
            "cooccur_weight": self.cooccur_weight,
            "cooccur_matrix": self.cooccur_matrix.tolist(),
            "diversity_weight": self.diversity_weight,
            "uncertainty_weight": self.uncertainty_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        return cls(**d)


def _check_targets(logits: Tensor, targets) -> np.ndarray:
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise InputError(f"targets shape {y.shape} != logits shape {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("targets must be binary (0/1)")
    return y


def focal_loss(logits: Tensor, targets, cfg: LossConfig) -> Tensor:
    """Mean over batch and classes of the class-weighted focal binary cross-entropy.

    With the co-occurrence prior enabled, adds
    ``cooccur_weight * mean_b sum_{c != c'} M[c, c'] p_c p_c'``.
    """
    y = _check_targets(logits, targets)
    n_classes = logits.shape[-1]
    if cfg.class_weights.shape != (n_classes,):
        raise ConfigurationError(f"class_weights has shape {cfg.class_weights.shape}, need ({n_classes},)")
    p = nx.clamp(nx.sigmoid(logits), P_CLAMP, 1.0 - P_CLAMP)
    one_minus = 1.0 - p
    pos = nx.mul(nx.mul(nx.power(one_minus, cfg.gamma), nx.log(p)), cfg.alpha * y)
    neg = nx.mul(nx.mul(nx.power(p, cfg.gamma), nx.log(one_minus)), (1.0 - cfg.alpha) * (1.0 - y))
    per_elem = nx.mul(pos + neg, -cfg.class_weights)
    loss = nx.mean(per_elem)
    if cfg.cooccur_weight > 0:
        # sum over ordered pairs c != c' of M p_c p_c'  ==  p^T M p  (M has zero diagonal)
        mp = nx.linear(p, nx.Tensor(cfg.cooccur_matrix))
        prior = nx.mean(nx.tsum(nx.mul(mp, p), axis=-1))
        loss = loss + nx.mul(prior, cfg.cooccur_weight)
    return loss


def class_weights_from_prevalence(prev) -> np.ndarray:
    """Inverse prevalence normalized to mean 1."""
    prev = np.asarray(prev, dtype=np.float64)
    if np.any(prev <= 0):
        absent = np.flatnonzero(prev <= 0).tolist()
        raise ConfigurationError(f"zero prevalence for class(es) {absent}: absent from training data")
    if np.any(prev > 1):
        raise ConfigurationError("prevalence values must be <= 1")
    inv = 1.0 / prev
    return inv / inv.mean()


def attention_diversity_loss(maps: Tensor) -> Tensor:
    """Mean cosine similarity over the unordered class pairs of each sample's maps [B, C, T]."""
    b, c, _ = maps.shape
    norms = nx.sqrt(nx.tsum(nx.mul(maps, maps), axis=-1, keepdims=True))  # [B, C, 1]
    unit = nx.div(maps, nx.broadcast_to(norms, maps.shape))
    cos = nx.matmul(unit, nx.swapaxes(unit, -1, -2))  # [B, C, C]
    upper = np.triu(np.ones((c, c)), k=1)
    n_pairs = c * (c - 1) // 2
    return nx.mul(nx.tsum(nx.mul(cos, upper)), 1.0 / (b * n_pairs))


def uncertainty_calibration(out: ModelOutput, targets) -> Tensor:
    """Mean over batch of ||u - |y - p|||^2.

    For binary y, |y - p| = y (1 - p) + (1 - y) p, which keeps the term
    smooth; gradients reach both the uncertainty head and the classifier.
    """
    y = _check_targets(out.logits, targets)
    p = nx.sigmoid(out.logits)
    err = nx.mul(1.0 - p, y) + nx.mul(p, 1.0 - y)
    diff = out.uncertainty - err
    return nx.mean(nx.tsum(nx.mul(diff, diff), axis=-1))


def total_loss(out: ModelOutput, targets, cfg: LossConfig) -> Tensor:
    loss = focal_loss(out.logits, targets, cfg)
    if cfg.diversity_weight > 0:
        loss = loss + nx.mul(attention_diversity_loss(out.explanation_maps), cfg.diversity_weight)
    if cfg.uncertainty_weight > 0:
        loss = loss + nx.mul(uncertainty_calibration(out, targets), cfg.uncertainty_weight)
    return loss
