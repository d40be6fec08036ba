"""Minimal NCHW tensor algebra with reverse-mode autodiff."""

from . import ops
from .params import Conv2d, Module, ParamStore, kaiming_uniform
from .tensor import DEFAULT_DTYPE, Tensor, backward, grad_enabled, no_grad

__all__ = [
    "Conv2d",
    "DEFAULT_DTYPE",
    "Module",
    "ParamStore",
    "Tensor",
    "backward",
    "grad_enabled",
    "kaiming_uniform",
    "no_grad",
    "ops",
]
