"""Dense float64 tensors with reverse-mode automatic differentiation.

Every op records a closure mapping the output gradient to one gradient per
parent. ``backward`` walks the graph once in reverse topological order and
then drops the closures, so a graph can be differentiated exactly once.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError

_GRAD_ENABLED = True
_CONSUMED = object()

GELU_C = math.sqrt(2.0 / math.pi)


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation, data prep)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

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

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def detach(self) -> Tensor:
        return Tensor(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar ``loss`` with respect to every leaf requiring grad.

    Leaf ``.grad`` attributes are overwritten and the same gradients are
    returned keyed by tensor. Intermediate closures are released afterwards.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward() needs a scalar tensor")
    if loss._backward is _CONSUMED:
        raise ContractError("graph already consumed by a previous backward()")
    if not loss.requires_grad:
        return {}

    order = _topo_order(loss)
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
        node._parents = ()
        node._backward = _CONSUMED
    for leaf, g in leaves.items():
        leaf.grad = g
    return leaves


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (0.5 * g / out,))


def cos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),))


def arccos(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.arccos(a.data), (a,), lambda g: (-g / np.sqrt(1.0 - a.data**2),))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; the gradient is zero where clamping was active."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def softplus(a) -> Tensor:
    """log(1 + e^x) evaluated as max(x, 0) + log1p(e^-|x|)."""
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def bw(g):
        e = np.exp(-np.abs(x))
        return (g * np.where(x >= 0, 1.0, e) / (1.0 + e),)

    return _result(out, (a,), bw)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = x2 * 0.044715
    t += 1.0
    t *= x
    t *= GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= x
    out *= 0.5

    def bw(g):
        dt = (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * dt),)

    return _result(out, (a,), bw)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(out, (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) / float(count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a) -> Tensor:
    axes = list(range(as_tensor(a).ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (np.ndarray, list)) for i in items)


def getitem(a, idx) -> Tensor:
    """Basic slicing and integer-array gathering (also serves embedding lookup)."""
    a = as_tensor(a)
    fancy = _is_fancy(idx)
    if fancy:
        items = idx if isinstance(idx, tuple) else (idx,)
        items = tuple(np.nonzero(i)[0] if isinstance(i, np.ndarray) and i.dtype == bool else i for i in items)
        idx = items if isinstance(idx, tuple) else items[0]

    def bw(g):
        full = np.zeros_like(a.data)
        if fancy:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return _result(a.data[idx], (a,), bw)


def embedding(table, indices) -> Tensor:
    """Row lookup ``table[indices]``."""
    return getitem(table, np.asarray(indices, dtype=np.int64))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    axis = axis % ts[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
# linear algebra and network primitives
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError("matmul operands must be at least 2-D")

    def bw(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data @ b.data, (a, b), bw)


def conv1d(x, weight, bias, kernel: int, stride: int) -> Tensor:
    """Channel-last 1-D convolution without padding.

    ``x`` is (B, L, C_in); ``weight`` is (kernel * C_in, C_out) with rows
    ordered tap-major; ``bias`` may be None; the output is (B, floor((L - kernel) / stride) + 1, C_out).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    bias = None if bias is None else as_tensor(bias)
    B, L, cin = x.shape
    if L < kernel:
        raise ContractError(f"sequence length {L} shorter than kernel {kernel}")
    out_len = (L - kernel) // stride + 1
    taps = stride * np.arange(out_len)[:, None] + np.arange(kernel)[None, :]
    cols = x.data[:, taps, :].reshape(B, out_len, kernel * cin)
    out = cols @ weight.data
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = gw = gb = None
        if x.requires_grad:
            gcols = (g @ weight.data.T).reshape(B, out_len, kernel, cin)
            gx = np.zeros_like(x.data)
            stop = stride * (out_len - 1) + 1
            for j in range(kernel):
                gx[:, j:j + stop:stride, :] += gcols[:, :, j, :]
        if weight.requires_grad:
            gw = cols.reshape(-1, kernel * cin).T @ g.reshape(-1, g.shape[-1])
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 1))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    return _result(out, (x, weight) if bias is None else (x, weight, bias), bw)


def layer_norm(x, scale, shift, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply a learned affine map."""
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * scale.data + shift.data

    def bw(g):
        gx = None
        if x.requires_grad:
            gxhat = g * scale.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        gs = unbroadcast(g * xhat, scale.shape) if scale.requires_grad else None
        gb = unbroadcast(g, shift.shape) if shift.requires_grad else None
        return gx, gs, gb

    return _result(out, (x, scale, shift), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    """x - logsumexp(x), with the sum written as log1p of the non-maximal terms.

    Summing 1 + tiny terms before the log would round the tiny part away.
    """
    a = as_tensor(a)
    top = np.argmax(a.data, axis=axis)
    top = np.expand_dims(top, axis)
    shifted = a.data - np.take_along_axis(a.data, top, axis=axis)
    rest = np.exp(shifted)
    np.put_along_axis(rest, top, 0.0, axis=axis)
    out = shifted - np.log1p(rest.sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (a,), bw)


def l2_normalize(a, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length; zero vectors are rejected."""
    a = as_tensor(a)
    norm = np.sqrt((a.data**2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ContractError("cannot L2-normalize a zero vector")
    out = a.data / norm

    def bw(g):
        return ((g - out * (g * out).sum(axis=axis, keepdims=True)) / norm,)

    return _result(out, (a,), bw)


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    return tsum(l2_normalize(a, axis) * l2_normalize(b, axis), axis=axis)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward the exact ``hard`` values; route gradients to ``soft`` unchanged."""
    soft = as_tensor(soft)
    hard = np.asarray(hard, dtype=np.float64)
    if hard.shape != soft.shape:
        raise ContractError("straight-through operands differ in shape")
    return _result(hard.copy(), (soft,), lambda g: (g,))
