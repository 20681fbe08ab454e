"""Numerical substrate: tensors with reverse-mode gradients, SGD, gradient oracle."""

from ._conv import BACKEND
from .gradcheck import finite_difference_grad, relative_error
from .optim import Adam, NonFiniteGradient, SgdConfig, sgd_step
from .tensor import *  # noqa: F401,F403
from .tensor import __all__ as _tensor_all

__all__ = [
    "Adam", "BACKEND", "NonFiniteGradient", "SgdConfig", "finite_difference_grad", "relative_error", "sgd_step",
    *_tensor_all,
]
