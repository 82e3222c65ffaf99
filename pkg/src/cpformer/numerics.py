"""Dense float64 tensors with taped reverse-mode differentiation.

Every operation records a node holding its parents and a backward rule.
``backward`` walks the recorded nodes in reverse creation order, which is a
valid reverse topological order because a node is always created after its
inputs. A graph is consumed by ``backward`` and cannot be traversed twice.

Broadcasting is deliberately narrow: binary elementwise ops accept equal
shapes or a trailing-suffix shape (bias-add style, scalars included). Any
other expansion must go through :func:`broadcast_to`.
"""

from __future__ import annotations

import contextlib
import itertools
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .errors import ContractError, DimensionError, ConfigurationError, GraphError, NumericHealthError

_seq = itertools.count()
_grad_enabled = True

_SQRT2 = np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class _Node:
    __slots__ = ("parents", "backward", "seq", "op", "consumed")

    def __init__(self, parents, backward, op):
        self.parents = parents
        self.backward = backward
        self.seq = next(_seq)
        self.op = op
        self.consumed = False


class Tensor:
    """N-dimensional float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: _Node | None = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            bad = int(np.size(self.data) - np.count_nonzero(np.isfinite(self.data)))
            raise NumericHealthError(f"{what}: {bad} non-finite value(s)")
        return self

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def make_op(out: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Wrap ``out`` as the result of an operation on ``parents``.

    ``backward_fn(g)`` receives the upstream gradient and returns one
    gradient array (or None) per parent. Exposed so callers can register
    custom operations.
    """
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    t._node = None
    t.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._node = _Node(tuple(parents), backward_fn, op)
    return t


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from the scalar ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on a recorded graph")
    if loss._node is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        if node.consumed:
            raise GraphError(f"graph through op '{node.op}' was already consumed by backward")
        seen.add(id(node))
        order.append(t)
        stack.extend(node.parents)
    order.sort(key=lambda t: t._node.seq, reverse=True)

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for t in order:
        node = t._node
        g = grads.pop(id(t), None)
        if g is not None:
            pgrads = node.backward(g)
            for p, pg in zip(node.parents, pgrads):
                if pg is None or not p.requires_grad:
                    continue
                if p._node is None:
                    p.grad = np.array(pg, dtype=np.float64) if p.grad is None else p.grad + pg
                else:
                    key = id(p)
                    grads[key] = grads[key] + pg if key in grads else pg
        node.consumed = True
        node.backward = None
        node.parents = ()


# ---------------------------------------------------------------------------
# binary elementwise

def _suffix_rule(a: tuple, b: tuple, op: str) -> None:
    if a == b:
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} are not equal or trailing-suffix compatible")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    return g.reshape((-1,) + shape).sum(axis=0) if lead > 0 else g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_rule(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b), lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_rule(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b), lambda g: (_reduce_to(g, sa), -_reduce_to(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_rule(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return (_reduce_to(g * bd, ad.shape) if a.requires_grad else None,
                _reduce_to(g * ad, bd.shape) if b.requires_grad else None)

    return make_op(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _suffix_rule(a.shape, b.shape, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_reduce_to(g / bd, ad.shape) if a.requires_grad else None,
                _reduce_to(-g * out / bd, bd.shape) if b.requires_grad else None)

    return make_op(out, (a, b), bw, "div")


# ---------------------------------------------------------------------------
# unary elementwise

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.log(xd), (x,), lambda g: (g / xd,), "log")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    e = float(exponent)
    out = xd ** e
    if e == 0.0:
        return make_op(out, (x,), lambda g: (np.zeros_like(g),), "pow")
    return make_op(out, (x,), lambda g: (g * e * xd ** (e - 1.0),), "pow")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_op(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    # split form avoids overflow in exp for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    out = stable_sigmoid(x.data)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / _SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * xd * xd)
    return make_op(xd * cdf, (x,), lambda g: (g * (cdf + xd * pdf),), "gelu")


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return make_op(np.maximum(xd, 0.0), (x,), lambda g: (g * (xd > 0),), "relu")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones_like(xd, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return make_op(out, (x,), lambda g: (g * inside,), "clamp")


def dropout(x: Tensor, p: float, rng: "Rng | None", training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0 or rng is None:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigurationError(f"dropout rate must be in [0, 1), got {p}")
    keep = rng.uniform(size=x.shape) >= p
    scale = keep / (1.0 - p)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,), "dropout")


# ---------------------------------------------------------------------------
# reductions and shape ops

def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_op(np.asarray(out, dtype=np.float64), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(tsum(x, axis, keepdims), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    inv = tuple(np.argsort(axes))
    return make_op(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def broadcast_to(x: Tensor, shape) -> Tensor:
    """Explicit numpy-rule expansion; backward sums over expanded axes."""
    shape = tuple(shape)
    src = x.shape
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {src} to {shape}") from exc

    def bw(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_op(np.array(out), (x,), bw, "broadcast_to")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return make_op(out, tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis)


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape
    out = x.data[index]

    def bw(g):
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return make_op(np.array(out, dtype=np.float64), (x,), bw, "getitem")


# ---------------------------------------------------------------------------
# linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes must match exactly."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.ndim != b.ndim:
        raise DimensionError(f"matmul: need equal-rank operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None,
                np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None)

    return make_op(ad @ bd, (a, b), bw, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x[..., in] -> x @ weight.T + bias`` with ``weight`` stored as [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} != ({wd.shape[0]},)")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        g2 = g.reshape(-1, g.shape[-1])
        gw = g2.T @ xd.reshape(-1, xd.shape[-1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op(out, parents, bw, "linear")


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Same-padded cross-correlation: ``x[..., C_in, L]``, ``w[C_out, C_in, K]`` (K odd)."""
    if w.ndim != 3:
        raise DimensionError(f"conv1d: weight must be [C_out, C_in, K], got {w.shape}")
    c_out, c_in, k = w.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv1d: kernel size must be odd, got {k}")
    if x.ndim < 2 or x.shape[-2] != c_in:
        raise DimensionError(f"conv1d: input {x.shape} does not have {c_in} channels")
    lead = x.shape[:-2]
    length = x.shape[-1]
    pad = (k - 1) // 2
    xd = x.data.reshape((-1, c_in, length))
    wd = w.data
    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad)))
    win = sliding_window_view(xp, k, axis=-1)  # [N, C_in, L, K]
    out = np.einsum("nclk,ock->nol", win, wd, optimize=True)
    if b is not None:
        if b.shape != (c_out,):
            raise DimensionError(f"conv1d: bias shape {b.shape} != ({c_out},)")
        out = out + b.data[:, None]
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g3 = g.reshape((-1, c_out, length))
        gx = gw = None
        if x.requires_grad:
            gp = np.pad(g3, ((0, 0), (0, 0), (k - 1, k - 1)))
            gwin = sliding_window_view(gp, k, axis=-1)  # [N, C_out, L+K-1, K]
            dxp = np.einsum("nomk,ock->ncm", gwin, wd[:, :, ::-1], optimize=True)
            gx = dxp[:, :, pad:pad + length].reshape(lead + (c_in, length))
        if w.requires_grad:
            gw = np.einsum("nclk,nol->ock", win, g3, optimize=True)
        if b is None:
            return gx, gw
        return gx, gw, g3.sum(axis=(0, 2))

    return make_op(out.reshape(lead + (c_out, length)), parents, bw, "conv1d")


def avg_pool1d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean over the last axis; a trailing partial window averages what it has."""
    if factor < 1:
        raise ConfigurationError(f"pool factor must be >= 1, got {factor}")
    length = x.shape[-1]
    n_out = -(-length // factor)
    padded = n_out * factor
    counts = np.full(n_out, float(factor))
    counts[-1] = length - (n_out - 1) * factor
    xd = x.data
    if padded != length:
        xd = np.concatenate([xd, np.zeros(x.shape[:-1] + (padded - length,))], axis=-1)
    out = xd.reshape(x.shape[:-1] + (n_out, factor)).sum(axis=-1) / counts

    def bw(g):
        gg = np.repeat(g / counts, factor, axis=-1)
        return (gg[..., :length],)

    return make_op(out, (x,), bw, "avg_pool1d")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / np.sum(e, axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_op(out, (x,), bw, "softmax")


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(f"layernorm: affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        g2 = g.reshape(-1, d)
        return gx, (g2 * xhat.reshape(-1, d)).sum(axis=0), g2.sum(axis=0)

    return make_op(out, (x, gamma, beta), bw, "layernorm")


def interpolation_matrix(l_src: int, l_dst: int) -> np.ndarray:
    """[l_src, l_dst] weights for endpoint-aligned linear interpolation."""
    if l_dst < 1 or l_src < 1:
        raise DimensionError(f"interpolation lengths must be >= 1, got {l_src} -> {l_dst}")
    m = np.zeros((l_src, l_dst))
    if l_src == 1:
        m[0, :] = 1.0
        return m
    if l_dst == 1:
        m[0, 0] = 1.0
        return m
    pos = np.arange(l_dst) * (l_src - 1) / (l_dst - 1)
    lo = np.minimum(np.floor(pos).astype(int), l_src - 2)
    frac = pos - lo
    cols = np.arange(l_dst)
    m[lo, cols] += 1.0 - frac
    m[lo + 1, cols] += frac
    return m


def linear_interpolate_1d(x: Tensor, l_dst: int) -> Tensor:
    """Resample the last axis to ``l_dst`` points with endpoints aligned."""
    if l_dst < 1:
        raise DimensionError("interpolation target length must be >= 1")
    m = interpolation_matrix(x.shape[-1], l_dst)
    return make_op(x.data @ m, (x,), lambda g: (g @ m.T,), "interpolate")


# ---------------------------------------------------------------------------
# randomness

class Rng:
    """Seeded random stream; identical seed and call sequence give identical draws."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def normal(self, size=None, std: float = 1.0, mean: float = 0.0) -> np.ndarray:
        return self._gen.normal(mean, std, size)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream derived from (seed, key)."""
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, int(key)])
        return Rng(int(ss.generate_state(1, dtype=np.uint64)[0]))

    def get_state(self) -> dict:
        return self._gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state


# ---------------------------------------------------------------------------
# finite-difference oracle

@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    n_checked: int
    tol: float
    worst: str = ""
    per_tensor: dict = field(default_factory=dict)

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} max_abs_err={self.max_abs_err:.3e} "
                f"n={self.n_checked} worst={self.worst}")


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps vanishing gradients from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[[], Tensor], inputs: Tensor | Iterable[Tensor], h: float = 1e-5,
               tol: float = 1e-4, floor: float = 1e-6, max_elements: int | None = None,
               rng: Rng | None = None) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f()`` with central differences.

    ``f`` must read the current values of ``inputs`` and be deterministic.
    With ``max_elements`` set, each tensor is checked on a random subset.
    """
    tensors = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    for t in tensors:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    worst_rel, worst_abs, worst_name, n = 0.0, 0.0, "", 0
    per = {}
    for i, (t, ga) in enumerate(zip(tensors, analytic)):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = (rng or Rng(0)).choice(flat.size, size=max_elements, replace=False)
        num = np.empty(idx.size)
        with no_grad():
            for j, e in enumerate(idx):
                orig = flat[e]
                flat[e] = orig + h
                fp = f().item()
                flat[e] = orig - h
                fm = f().item()
                flat[e] = orig
                num[j] = (fp - fm) / (2.0 * h)
        an = ga.reshape(-1)[idx]
        rel = relative_error(an, num, floor)
        ab = np.abs(an - num)
        label = t.name or f"input{i}"
        per[label] = float(rel.max()) if rel.size else 0.0
        n += idx.size
        if rel.size and rel.max() > worst_rel:
            worst_rel = float(rel.max())
            worst_name = f"{label}[{int(idx[int(rel.argmax())])}]"
        if ab.size:
            worst_abs = max(worst_abs, float(ab.max()))
    return GradCheckReport(worst_rel, worst_abs, worst_rel < tol, n, tol, worst_name, per)


# ---------------------------------------------------------------------------
# serialization: flat little-endian f64 blob + JSON sidecar {shape, name}

def save_array(path: str | os.PathLike, array: np.ndarray, name: str | None = None) -> None:
    path = os.fspath(path)
    arr = np.asarray(array, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
    with open(path, "wb") as fh:
        fh.write(arr.tobytes(order="C"))
    with open(path + ".json", "w") as fh:
        json.dump({"shape": list(arr.shape), "name": name or os.path.basename(path)}, fh)


def load_array(path: str | os.PathLike) -> np.ndarray:
    path = os.fspath(path)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    shape = tuple(meta["shape"])
    with open(path, "rb") as fh:
        raw = fh.read()
    arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    expected = int(np.prod(shape)) if shape else 1
    if arr.size != expected:
        raise DimensionError(f"{path}: {arr.size} values but sidecar shape {shape}")
    return arr.reshape(shape)


def save_tensor(path, t: Tensor) -> None:
    save_array(path, t.data, t.name)


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    with open(os.fspath(path) + ".json") as fh:
        name = json.load(fh).get("name")
    return Tensor(load_array(path), requires_grad=requires_grad, name=name)
