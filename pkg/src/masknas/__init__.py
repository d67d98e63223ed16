"""Differentiable cell-based architecture search with hierarchical mask
pruning, small enough to run end to end on one CPU core."""

__version__ = "0.1.0"

from .numcore import Tape, Tensor, backward, finite_diff_check

__all__ = ["Tape", "Tensor", "backward", "finite_diff_check", "__version__"]
