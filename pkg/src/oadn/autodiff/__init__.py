"""Minimal dense tensors with reverse-mode differentiation."""

from .ops import (
    add,
    conv2d,
    cross_entropy,
    elementwise_mul,
    global_avg_pool,
    linear,
    matmul,
    max_reduce_set,
    mean,
    relu,
    reshape,
    scale,
    slice_,
    softmax,
    sum_,
)
from .tensor import NumericError, ShapeError, Tape, Tensor, active_tape, backward, no_tape

__all__ = [
    "NumericError",
    "ShapeError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "conv2d",
    "cross_entropy",
    "elementwise_mul",
    "global_avg_pool",
    "linear",
    "matmul",
    "max_reduce_set",
    "mean",
    "no_tape",
    "relu",
    "reshape",
    "scale",
    "slice_",
    "softmax",
    "sum_",
]
