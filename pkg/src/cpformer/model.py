"""Full network: tokenizer -> temporal encoding -> encoder -> dual heads -> fusion."""

from __future__ import annotations

import numpy as np

from . import numerics as nx
from .attention import EncoderStack
from .config import ModelConfig
from .heads import AdaptiveDiagnosticPooling, DiagnosticFusion, ExplainableDiagnosticHead, ModelOutput
from .layers import LayerNorm, Module
from .numerics import Rng
from .temporal import MultiResolutionTemporalEncoding
from .tokenizer import PatternTokenizer


class CardioPatternFormer(Module):
    def __init__(self, cfg: ModelConfig, rng: Rng):
        self.cfg = cfg
        self.tokenizer = PatternTokenizer(cfg, rng)
        self.temporal = MultiResolutionTemporalEncoding(cfg, rng)
        self.encoder = EncoderStack(cfg, rng)
        self.final_norm = LayerNorm(cfg.d_model)
        self.explain_head = ExplainableDiagnosticHead(cfg, rng)
        self.adaptive_head = AdaptiveDiagnosticPooling(cfg, rng)
        self.fusion = DiagnosticFusion()

    def __call__(self, x, rng: Rng | None = None, return_weights: bool = False) -> ModelOutput:
        """Forward a batch ``x[B, 12, L]`` (a single [12, L] record is promoted to B=1).

        ``rng`` drives dropout and is only consulted in training mode.
        """
        x = nx.as_tensor(x)
        if x.ndim == 2:
            x = nx.reshape(x, (1,) + x.shape)
        h = self.tokenizer(x)
        if self.cfg.use_temporal:
            h = self.temporal(h)
        h = nx.dropout(h, self.cfg.dropout, rng, self.training)
        attention = None
        if return_weights:
            h, attention = self.encoder(h, rng, return_weights=True)
        else:
            h = self.encoder(h, rng)
        h = self.final_norm(h)
        l_exp, maps = self.explain_head(h)
        l_adapt, relevance, uncertainty = self.adaptive_head(h)
        logits = self.fusion(l_exp, l_adapt)
        return ModelOutput(logits, l_exp, l_adapt, maps, relevance, uncertainty, attention)

    def physio_strengths(self) -> dict[str, float]:
        out = {}
        for i, layer in enumerate(self.encoder.layers):
            for name, p in layer.attn.strengths().items():
                out[f"layer{i}.{name}"] = p.data.tolist()
        return out


def build_model(cfg: ModelConfig, seed: int = 0) -> CardioPatternFormer:
    return CardioPatternFormer(cfg, Rng(seed))


def predict_logits(model: CardioPatternFormer, signals, batch_size: int = 32) -> np.ndarray:
    """Fused logits for ``signals[N, 12, L]`` in eval mode without recording a graph."""
    signals = np.asarray(signals, dtype=np.float64)
    was_training = model.training
    model.eval()
    try:
        chunks = []
        with nx.no_grad():
            for s in range(0, signals.shape[0], batch_size):
                chunks.append(model(signals[s:s + batch_size]).logits.data)
    finally:
        model.train(was_training)
    if not chunks:
        return np.zeros((0, model.cfg.n_classes))
    return np.concatenate(chunks, axis=0)


def predict_probs(model: CardioPatternFormer, signals, batch_size: int = 32) -> np.ndarray:
    return nx.stable_sigmoid(predict_logits(model, signals, batch_size))
