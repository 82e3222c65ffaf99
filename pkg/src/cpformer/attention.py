"""Self-attention with learnable physiological score biases, and the encoder stack.

Four bias terms are added to the scaled dot-product scores before the
softmax, each gated by its own learnable strength:

* local:  ``s_local * exp(-|i - j| / tau)``
* rhythm: ``w_h * cos(2*pi*(i - j) / period_h)`` with a fixed period per head
* cycle:  ``s_cycle * <phase_importance, softmax(cycle_detector(x))[:, j]>``,
  constant along the query axis
* beat:   ``s_beat * smooth_k(S_h)``, a learned 5-tap smoothing of each score
  row along the key axis
"""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .layers import Conv1d, LayerNorm, Linear, Module, kaiming_normal
from .numerics import Rng, Tensor


def local_kernel(t: int, tau: float) -> np.ndarray:
    idx = np.arange(t)
    return np.exp(-np.abs(idx[:, None] - idx[None, :]) / tau)


def rhythm_kernel(t: int, periods) -> np.ndarray:
    idx = np.arange(t)
    rel = idx[:, None] - idx[None, :]
    return np.stack([np.cos(2.0 * np.pi * rel / p) for p in periods])


class PhysioAttention(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        d, h = cfg.d_model, cfg.n_heads
        self.n_heads = h
        self.head_dim = cfg.head_dim
        self.w_q = kaiming_normal(rng, (d, d), d)
        self.w_k = kaiming_normal(rng, (d, d), d)
        self.w_v = kaiming_normal(rng, (d, d), d)
        self.w_o = kaiming_normal(rng, (d, d), d)
        s0 = cfg.init_strength
        self.local_bias_strength = nx.parameter(s0)
        self.local_tau = cfg.tau()
        self.rhythm_constraint_weight = nx.parameter(np.full(h, s0))
        self.rhythm_period_tokens = np.asarray(cfg.rhythm_periods(), dtype=np.float64)
        k1, k2 = cfg.cycle_kernels
        self.cycle_conv1 = Conv1d(rng, d, cfg.cycle_hidden, k1)
        self.cycle_conv2 = Conv1d(rng, cfg.cycle_hidden, cfg.n_phases, k2)
        self.phase_importance = nx.parameter(rng.normal(size=cfg.n_phases, std=1.0))
        self.cycle_attn_strength = nx.parameter(s0)
        self.beat_smooth_kernel = nx.parameter(np.full((1, 1, cfg.beat_kernel), 1.0 / cfg.beat_kernel))
        self.beat_weight_strength = nx.parameter(s0)
        self._kernels: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def strengths(self) -> dict[str, Tensor]:
        return {
            "local_bias_strength": self.local_bias_strength,
            "rhythm_constraint_weight": self.rhythm_constraint_weight,
            "cycle_attn_strength": self.cycle_attn_strength,
            "beat_weight_strength": self.beat_weight_strength,
        }

    def set_strengths(self, value: float) -> None:
        for p in self.strengths().values():
            p.data = np.full(p.shape, float(value))

    def _fixed(self, t: int):
        if t not in self._kernels:
            self._kernels[t] = (local_kernel(t, self.local_tau), rhythm_kernel(t, self.rhythm_period_tokens))
        return self._kernels[t]

    def phase_probabilities(self, x: Tensor) -> Tensor:
        """[B, n_phases, T] soft cardiac-phase assignment per token."""
        xt = nx.swapaxes(x, -1, -2)
        return nx.softmax(self.cycle_conv2(nx.gelu(self.cycle_conv1(xt))), axis=-2)

    def bias_terms(self, x: Tensor, scores: Tensor) -> dict[str, Tensor]:
        """The four additive score biases, each broadcast-compatible with ``scores``."""
        b, h, t, _ = scores.shape
        local, rhythm = self._fixed(t)
        b_local = nx.mul(nx.Tensor(local), self.local_bias_strength)  # [T, T]
        w = nx.broadcast_to(nx.reshape(self.rhythm_constraint_weight, (h, 1, 1)), (h, t, t))
        b_rhythm = nx.mul(w, nx.Tensor(rhythm))  # [H, T, T]
        phases = nx.swapaxes(self.phase_probabilities(x), -1, -2)  # [B, T, P]
        key_weight = nx.tsum(nx.mul(phases, self.phase_importance), axis=-1)  # [B, T]
        key_weight = nx.mul(key_weight, self.cycle_attn_strength)
        b_cycle = nx.broadcast_to(nx.reshape(key_weight, (b, 1, 1, t)), (b, h, t, t))
        rows = nx.reshape(scores, (b * h * t, 1, t))
        smoothed = nx.reshape(nx.conv1d(rows, self.beat_smooth_kernel), (b, h, t, t))
        b_beat = nx.mul(smoothed, self.beat_weight_strength)
        return {"local": b_local, "rhythm": b_rhythm, "cycle": b_cycle, "beat": b_beat}

    def _split(self, x: Tensor, w: Tensor) -> Tensor:
        b, t, _ = x.shape
        return nx.transpose(nx.reshape(nx.linear(x, w), (b, t, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def __call__(self, x: Tensor, return_weights: bool = False):
        b, t, d = x.shape
        q, k, v = self._split(x, self.w_q), self._split(x, self.w_k), self._split(x, self.w_v)
        scores = nx.mul(nx.matmul(q, nx.swapaxes(k, -1, -2)), 1.0 / math.sqrt(self.head_dim))
        total = scores
        for bias in self.bias_terms(x, scores).values():
            total = total + bias
        attn = nx.softmax(total, axis=-1)
        ctx = nx.reshape(nx.transpose(nx.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        out = nx.linear(ctx, self.w_o)
        return (out, attn) if return_weights else out


class EncoderLayer(Module):
    """Pre-norm residual block: attention then a GELU feed-forward."""

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.norm1 = LayerNorm(cfg.d_model)
        self.attn = PhysioAttention(cfg, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ff1 = Linear(rng, cfg.d_model, cfg.ffn_mult * cfg.d_model)
        self.ff2 = Linear(rng, cfg.ffn_mult * cfg.d_model, cfg.d_model)
        self.dropout = cfg.dropout

    def __call__(self, x: Tensor, rng: Rng | None = None, return_weights: bool = False):
        a = self.attn(self.norm1(x), return_weights=return_weights)
        weights = None
        if return_weights:
            a, weights = a
        x = x + nx.dropout(a, self.dropout, rng, self.training)
        f = self.ff2(nx.gelu(self.ff1(self.norm2(x))))
        x = x + nx.dropout(f, self.dropout, rng, self.training)
        return (x, weights) if return_weights else x


class EncoderStack(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.layers = [EncoderLayer(cfg, rng) for _ in range(cfg.n_layers)]

    def __call__(self, x: Tensor, rng: Rng | None = None, return_weights: bool = False):
        weights = []
        for layer in self.layers:
            if return_weights:
                x, w = layer(x, rng, return_weights=True)
                weights.append(w)
            else:
                x = layer(x, rng)
        return (x, weights) if return_weights else x
