"""Minimal differentiable-computation layer used by the forecasting model."""

from .autograd import Tensor, ShapeError, constant, parameter
from .optim import AdamState, adam_step, step_lr
from .rng import RngStream

__all__ = [
    "Tensor",
    "ShapeError",
    "constant",
    "parameter",
    "AdamState",
    "adam_step",
    "step_lr",
    "RngStream",
]
