"""Minimal reverse-mode autodiff on dense numpy buffers."""

from .tensor import (
    ContractError,
    DimensionError,
    Node,
    Tape,
    Tensor,
    as_tensor,
    get_default_dtype,
    grad_enabled,
    nan_checks_enabled,
    no_grad,
    precision,
    set_default_dtype,
    set_nan_checks,
    tensor,
)
from .ops import (
    add,
    concat,
    div,
    elu,
    exp,
    flatten,
    getitem,
    layer_norm,
    log,
    matmul,
    max_with_argmax,
    maximum,
    mean,
    mul,
    neg,
    pow_const,
    relu,
    reshape,
    softmax,
    sqrt,
    stack,
    sub,
    sum_,
    take_along_axis,
    transpose,
)
from .conv import conv2d, conv3d
from .sampling import grid_sample_2d, upsample_bilinear_2x, upsample_trilinear_2x
from .gradcheck import gradcheck, max_relative_error

__all__ = [
    "ContractError", "DimensionError", "Node", "Tape", "Tensor",
    "as_tensor", "get_default_dtype", "grad_enabled", "nan_checks_enabled",
    "no_grad", "precision", "set_default_dtype", "set_nan_checks", "tensor",
    "add", "concat", "div", "elu", "exp", "flatten", "getitem", "layer_norm",
    "log", "matmul", "max_with_argmax", "maximum", "mean", "mul", "neg",
    "pow_const", "relu", "reshape", "softmax", "sqrt", "stack", "sub",
    "sum_", "take_along_axis", "transpose",
    "conv2d", "conv3d",
    "grid_sample_2d", "upsample_bilinear_2x", "upsample_trilinear_2x",
    "gradcheck", "max_relative_error",
]
