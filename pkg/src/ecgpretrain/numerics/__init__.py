from . import tensor as ops
from .gradcheck import analytic_grad, grad_check, numeric_grad
from .optim import Adam, AdamState, adam_step
from .rng import Rng, fork
from .tensor import Tensor, backward, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "Rng",
    "Tensor",
    "adam_step",
    "analytic_grad",
    "backward",
    "fork",
    "grad_check",
    "no_grad",
    "numeric_grad",
    "ops",
]
