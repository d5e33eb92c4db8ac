"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .gradcheck import gradcheck, numerical_gradient, relative_error
from .ops import (
    depthwise_conv2d,
    log_softmax,
    pointwise_conv,
    softmax_rows,
    standardize,
    windowed_max,
)
from .tensor import (
    DEFAULT_DTYPE,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    backward,
    concat,
    getitem,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    sigmoid,
    sub,
    sum_to_shape,
    swap_last,
    transpose,
    tsum,
)

__all__ = [
    "DEFAULT_DTYPE",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "depthwise_conv2d",
    "getitem",
    "gradcheck",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "neg",
    "numerical_gradient",
    "pointwise_conv",
    "relative_error",
    "relu",
    "reshape",
    "sigmoid",
    "softmax_rows",
    "standardize",
    "sub",
    "sum_to_shape",
    "swap_last",
    "transpose",
    "tsum",
    "windowed_max",
]
