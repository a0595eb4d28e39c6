"""Finite-difference gradient verification."""
from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NumericError
from .tensor import Tensor, backward


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` at ``x``, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = f(Tensor(x.copy())).item()
        flat[i] = orig - eps
        down = f(Tensor(x.copy())).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2.0 * eps)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    grads = backward(f(xt))
    return grads.get(xt, np.zeros_like(xt.data))


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between backprop and central differences.

    Per coordinate the error is |a - n| / max(1e-12, |a| + |n|).
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    a = analytic_grad(f, x)
    n = numeric_grad(f, x, eps)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(n))):
        raise NumericError("non-finite gradient in grad_check")
    rel = np.abs(a - n) / np.maximum(1e-12, np.abs(a) + np.abs(n))
    return float(rel.max()) if rel.size else 0.0
