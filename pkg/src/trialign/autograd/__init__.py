"""Tape-based reverse-mode differentiation over float64 numpy arrays."""
from . import ops
from .check import analytic_gradient, grad_check, numeric_gradient
from .tape import Parameter, ShapeError, Tape, TapeError, Tensor, active_tape, lift

__all__ = [
    "ops", "Parameter", "ShapeError", "Tape", "TapeError", "Tensor", "active_tape", "lift",
    "grad_check", "numeric_gradient", "analytic_gradient",
]
