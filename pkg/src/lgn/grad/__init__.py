"""Minimal float64 tensor arithmetic with reverse-mode differentiation."""

from . import ops
from .gradcheck import grad_check
from .kernels import BACKEND
from .tensor import Parameter, Tape, Tensor, backward, current_tape, zero_grads

__all__ = [
    "BACKEND",
    "Parameter",
    "Tape",
    "Tensor",
    "backward",
    "current_tape",
    "grad_check",
    "ops",
    "zero_grads",
]
