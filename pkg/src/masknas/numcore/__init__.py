"""Numeric core: float64 tensors, a reverse-mode tape, the differentiable
primitives, and the candidate-op compositions built from them."""

from . import functional, ops
from .kernels import BACKEND
from .ops import CANDIDATE_OPS, OpParams, aux_forward, init_op_params, op_forward
from .tensor import Tape, Tensor, active_tape, backward, finite_diff_check

__all__ = [
    "BACKEND",
    "CANDIDATE_OPS",
    "OpParams",
    "Tape",
    "Tensor",
    "active_tape",
    "aux_forward",
    "backward",
    "finite_diff_check",
    "functional",
    "init_op_params",
    "op_forward",
    "ops",
]
