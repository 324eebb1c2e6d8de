"""Float64 tensor primitives, gradient checking, Adam and seeded RNG."""

from . import checkpoint, ops
from .autograd import GradCheckReport, backward, grad_check, zero_grad
from .optim import AdamState, adam_step
from .rng import Rng, stream_id

__all__ = [
    "AdamState",
    "GradCheckReport",
    "Rng",
    "adam_step",
    "backward",
    "checkpoint",
    "grad_check",
    "ops",
    "stream_id",
    "zero_grad",
]
