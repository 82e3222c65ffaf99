"""Learned temporal embeddings at several resolutions, added to tokens."""

from __future__ import annotations

import math

from . import numerics as nx
from .config import ModelConfig
from .errors import ConfigurationError
from .layers import Linear, Module
from .numerics import Rng, Tensor


class MultiResolutionTemporalEncoding(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.embeddings = [
            nx.parameter(rng.normal(size=(cfg.d_model, math.ceil(cfg.max_seq_len / r)), std=0.02))
            for r in cfg.temporal_scales
        ]
        self.projection = Linear(rng, len(cfg.temporal_scales) * cfg.d_model, cfg.d_model)

    def encoding(self, t: int) -> Tensor:
        """The [t, d_model] additive encoding for a sequence of ``t`` tokens."""
        if t > self.cfg.max_seq_len:
            raise ConfigurationError(f"sequence length {t} exceeds max_seq_len={self.cfg.max_seq_len}")
        paths = []
        for r, emb in zip(self.cfg.temporal_scales, self.embeddings):
            src = emb[:, : math.ceil(t / r)]
            paths.append(nx.linear_interpolate_1d(src, t))  # [d, t]
        stacked = nx.concat(paths, axis=0)  # [S*d, t]
        return self.projection(nx.transpose(stacked))

    def __call__(self, tokens: Tensor) -> Tensor:
        return tokens + self.encoding(tokens.shape[-2])
