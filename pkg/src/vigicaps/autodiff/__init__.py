"""Small reverse-mode differentiation engine over float64 numpy arrays."""

from . import ops
from .gradcheck import grad_check, grad_check_params
from .ops import BatchNormState
from .tensor import Tape, Tensor

__all__ = ["Tape", "Tensor", "BatchNormState", "ops", "grad_check", "grad_check_params"]
