"""Hybrid CNN/transformer knowledge distillation on a small numpy autodiff engine."""
from .tensor import Tensor, backward, grad_check, no_grad, precision, set_precision

__version__ = "0.1.0"
