"""Masked supernetwork architecture search with zero-shot space pruning."""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, finite_difference_check  # noqa: F401
from .kernels import ACTIVE_BACKEND  # noqa: F401
