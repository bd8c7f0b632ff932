"""Minimal reverse-mode automatic differentiation over numpy arrays."""

from . import ops
from .layers import ParamStore
from .optim import Adam, ExponentialDecay, adam_update
from .tensor import Parameter, ShapeError, Tape, Tensor, backward, nan_guard, no_grad

__all__ = [
    "Adam",
    "ExponentialDecay",
    "ParamStore",
    "Parameter",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_update",
    "backward",
    "nan_guard",
    "no_grad",
    "ops",
]
