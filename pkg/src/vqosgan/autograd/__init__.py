"""Small float64 tensor engine with reverse-mode differentiation."""

from . import ops
from .layers import Conv2d, ConvTranspose2d, Dense, LayerParams, Module
from .optim import Adam, AdamState, adam_step
from .tensor import Tensor, no_grad, tensor

__all__ = [
    "Adam",
    "AdamState",
    "Conv2d",
    "ConvTranspose2d",
    "Dense",
    "LayerParams",
    "Module",
    "Tensor",
    "adam_step",
    "no_grad",
    "ops",
    "tensor",
]
