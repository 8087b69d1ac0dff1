"""Minimal reverse-mode differentiation over numpy."""

from . import ops
from .gradcheck import GradCheckReport, grad_check
from .nn import Module
from .ops import OPS, op_forward
from .tensor import (ContractError, ShapeError, Tensor, UnsupportedOpError, get_default_dtype,
                     no_grad, parameter, precision, set_default_dtype)

__all__ = [
    "ops", "OPS", "op_forward", "Module", "Tensor", "parameter", "no_grad", "precision",
    "get_default_dtype", "set_default_dtype", "grad_check", "GradCheckReport",
    "ShapeError", "ContractError", "UnsupportedOpError",
]
