"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0 and self.epsilon > 0.0):
            raise ContractError("Adam needs 0 < beta1, beta2 < 1 and epsilon > 0")


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update.

    Parameters without an entry in ``grads`` are left untouched. Returns new
    parameter arrays and the advanced state; inputs are not modified.
    """
    if lr <= 0:
        raise ContractError("learning rate must be positive")
    step = state.step + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    new_params = dict(params)
    m_all, v_all = dict(state.first_moment), dict(state.second_moment)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
        m = m_all.get(name, np.zeros_like(p))
        v = v_all.get(name, np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        m_all[name], v_all[name] = m, v
    new_state = AdamState(step, m_all, v_all, b1, b2, eps)
    return new_params, new_state


class Adam:
    """Applies :func:`adam_step` in place to a dict of parameter tensors."""

    def __init__(self, params: dict[str, Tensor], lr: float, state: AdamState | None = None):
        self.params = params
        self.lr = lr
        self.state = state or AdamState()

    def step(self, grads: dict[str, np.ndarray]) -> None:
        arrays = {name: t.data for name, t in self.params.items()}
        updated, self.state = adam_step(arrays, grads, self.state, self.lr)
        for name in grads:
            self.params[name].data = updated[name]
