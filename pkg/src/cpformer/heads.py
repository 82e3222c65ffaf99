"""Classification heads and their learned fusion."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .layers import Linear, Module, kaiming_normal, zeros
from .numerics import Rng, Tensor


@dataclass
class ModelOutput:
    """Batched model outputs; leading axis is the batch."""

    logits: Tensor  # [B, C] fused
    logits_explain: Tensor  # [B, C]
    logits_adaptive: Tensor  # [B, C]
    explanation_maps: Tensor  # [B, C, T]
    relevance: Tensor  # [B, T]
    uncertainty: Tensor  # [B, C]
    attention: list | None = None  # per layer [B, H, T, T]

    def probabilities(self) -> np.ndarray:
        return nx.stable_sigmoid(self.logits.data)


class ExplainableDiagnosticHead(Module):
    """One small attention scorer and one linear predictor per class.

    The per-class scorers ``d -> hidden -> 1`` are evaluated together: the
    first layers are stacked into a single [C*hidden, d] matrix and the
    second layers act block-diagonally.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng):
        c, d, hid = cfg.n_classes, cfg.d_model, cfg.explain_hidden
        self.n_classes, self.hidden = c, hid
        self.score_w1 = kaiming_normal(rng, (c * hid, d), d)
        self.score_b1 = zeros(c * hid)
        self.score_w2 = kaiming_normal(rng, (c, hid), hid)
        self.score_b2 = zeros(c)
        self.pred_w = kaiming_normal(rng, (c, d), d)
        self.pred_b = zeros(c)

    def scores(self, h: Tensor) -> Tensor:
        """Unnormalized per-class token scores, [B, C, T]."""
        b, t, _ = h.shape
        hidden = nx.tanh(nx.linear(h, self.score_w1, self.score_b1))
        hidden = nx.reshape(hidden, (b, t, self.n_classes, self.hidden))
        s = nx.tsum(nx.mul(hidden, self.score_w2), axis=-1) + self.score_b2  # [B, T, C]
        return nx.swapaxes(s, -1, -2)

    def __call__(self, h: Tensor):
        maps = nx.softmax(self.scores(h), axis=-1)  # [B, C, T]
        context = nx.matmul(maps, h)  # [B, C, d]
        logits = nx.tsum(nx.mul(context, self.pred_w), axis=-1) + self.pred_b
        return logits, maps


class AdaptiveDiagnosticPooling(Module):
    """Relevance-weighted mean pooling, a classifier and an uncertainty estimator."""

    eps = 1e-8

    def __init__(self, cfg: ModelConfig, rng: Rng):
        d = cfg.d_model
        self.relevance_detector = Linear(rng, d, 1)
        self.cls1 = Linear(rng, d, cfg.classifier_hidden)
        self.cls2 = Linear(rng, cfg.classifier_hidden, cfg.n_classes)
        self.unc1 = Linear(rng, d, cfg.uncertainty_hidden)
        self.unc2 = Linear(rng, cfg.uncertainty_hidden, cfg.n_classes)

    def pool(self, h: Tensor):
        b, t, d = h.shape
        r = nx.sigmoid(self.relevance_detector(h))  # [B, T, 1]
        weighted = nx.tsum(nx.mul(nx.broadcast_to(r, (b, t, d)), h), axis=1)  # [B, d]
        denom = nx.broadcast_to(nx.tsum(r, axis=1) + self.eps, (b, d))
        return nx.div(weighted, denom), nx.reshape(r, (b, t))

    def __call__(self, h: Tensor):
        pooled, relevance = self.pool(h)
        logits = self.cls2(nx.gelu(self.cls1(pooled)))
        uncertainty = nx.sigmoid(self.unc2(nx.gelu(self.unc1(pooled))))
        return logits, relevance, uncertainty


class DiagnosticFusion(Module):
    """Convex combination of the two heads with softmax-normalized scalar weights."""

    def __init__(self):
        self.alpha_explain = nx.parameter(0.0)
        self.alpha_adaptive = nx.parameter(0.0)

    def weights(self) -> Tensor:
        pair = nx.stack([self.alpha_explain, self.alpha_adaptive])
        return nx.softmax(pair, axis=0)

    def __call__(self, l_exp: Tensor, l_adapt: Tensor) -> Tensor:
        w = self.weights()
        return nx.mul(l_exp, w[0]) + nx.mul(l_adapt, w[1])
