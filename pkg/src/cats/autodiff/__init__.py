"""Minimal reverse-mode autodiff over numpy arrays."""
from .functional import (
    BatchNormState,
    ShapeError,
    add,
    batch_norm3d,
    concat,
    conv3d,
    conv_transpose3d,
    div,
    exp,
    gelu,
    layer_norm,
    linear,
    log,
    matmul,
    maxpool3d,
    mean,
    mul,
    permute,
    pointwise,
    relu,
    reshape,
    softmax,
    sub,
    sum,
)
from .gradcheck import grad_check, grad_check_details
from .tensor import Tensor, is_grad_enabled, no_grad, tensor

__all__ = [
    "BatchNormState", "ShapeError", "Tensor", "add", "batch_norm3d", "concat", "conv3d",
    "conv_transpose3d", "div", "exp", "gelu", "grad_check", "grad_check_details",
    "is_grad_enabled", "layer_norm", "linear", "log", "matmul", "maxpool3d", "mean", "mul",
    "no_grad", "permute", "pointwise", "relu", "reshape", "softmax", "sub", "sum", "tensor",
]
