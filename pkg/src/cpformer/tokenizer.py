"""Multi-scale convolutional pattern tokenizer."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .errors import ConfigurationError, InputError
from .layers import Conv1d, Linear, Module
from .numerics import Rng, Tensor


class PatternTokenizer(Module):
    """Decompose a 12-lead signal into a sequence of token embeddings.

    Each kernel size contributes ``num_patterns`` learned detectors; their
    GELU responses are concatenated, average-pooled in time by
    ``pool_factor`` and projected to ``d_model``.
    """

    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.convs = [Conv1d(rng, cfg.n_leads, cfg.num_patterns, k) for k in cfg.kernel_sizes]
        self.projection = Linear(rng, cfg.num_patterns * len(cfg.kernel_sizes), cfg.d_model)
        self.positional = nx.parameter(rng.normal(size=(cfg.max_seq_len, cfg.d_model), std=0.02))

    def n_tokens(self, length: int) -> int:
        return -(-length // self.cfg.pool_factor)

    def pre_activations(self, x: Tensor) -> list[Tensor]:
        """Per-scale conv outputs before the nonlinearity, each [..., P, L]."""
        return [conv(x) for conv in self.convs]

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        length = x.shape[-1]
        if x.shape[-2] != cfg.n_leads:
            raise InputError(f"expected {cfg.n_leads} leads, got shape {x.shape}")
        if length < cfg.min_length:
            raise InputError(f"signal length {length} shorter than largest kernel {cfg.min_length}")
        t = self.n_tokens(length)
        if t > cfg.max_seq_len:
            raise ConfigurationError(f"{t} tokens exceed max_seq_len={cfg.max_seq_len}")
        feats = nx.concat([nx.gelu(a) for a in self.pre_activations(x)], axis=-2)  # [..., 80, L]
        pooled = nx.avg_pool1d(feats, cfg.pool_factor)  # [..., 80, T]
        tokens = self.projection(nx.swapaxes(pooled, -1, -2))  # [..., T, d]
        if cfg.use_positional:
            tokens = tokens + self.positional[:t]
        return tokens

    def token_times(self, n_tokens: int) -> np.ndarray:
        """[n_tokens, 2] start/end seconds covered by each token."""
        step = self.cfg.pool_factor / self.cfg.sample_rate_hz
        k = np.arange(n_tokens)
        return np.stack([k * step, (k + 1) * step], axis=1)
