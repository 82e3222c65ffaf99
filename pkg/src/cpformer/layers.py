"""Parameter containers built on :mod:`cpformer.numerics`."""

from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .numerics import Rng, Tensor


def kaiming_normal(rng: Rng, shape, fan_in: int, name: str | None = None) -> Tensor:
    return nx.parameter(rng.normal(size=shape, std=math.sqrt(2.0 / fan_in)), name)


def zeros(shape, name: str | None = None) -> Tensor:
    return nx.parameter(np.zeros(shape), name)


class Module:
    """Walks attributes to find parameters; mirrors the usual torch idiom."""

    training = True

    def named_parameters(self, prefix: str = ""):
        for key, val in vars(self).items():
            full = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, rng: Rng, d_in: int, d_out: int, bias: bool = True):
        self.weight = kaiming_normal(rng, (d_out, d_in), d_in)
        self.bias = zeros(d_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


class Conv1d(Module):
    def __init__(self, rng: Rng, c_in: int, c_out: int, kernel: int, bias: bool = True):
        self.weight = kaiming_normal(rng, (c_out, c_in, kernel), c_in * kernel)
        self.bias = zeros(c_out) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv1d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = nx.parameter(np.ones(d))
        self.beta = zeros(d)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layernorm(x, self.gamma, self.beta, self.eps)
