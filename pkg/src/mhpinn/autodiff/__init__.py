"""Automatic differentiation: a scalar graph with dual numbers and an array tape."""
from .scalar import Dual, Value, grad, second_input_derivative, vsum, vtanh, vsin, vcos, vexp, vlog, vrelu
from . import tape
from .tape import Tensor, param

__all__ = [
    "Dual", "Value", "grad", "second_input_derivative", "vsum", "vtanh", "vsin",
    "vcos", "vexp", "vlog", "vrelu", "tape", "Tensor", "param",
]
