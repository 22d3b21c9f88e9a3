"""Dense tensors with reverse-mode autodiff."""
from .autograd import GraphError, ShapeError, Tensor, as_tensor, is_grad_enabled, no_grad
from .kernels import BACKEND
from .ops import (
    add,
    batch_take,
    concat_channels,
    conv2d,
    log_softmax,
    mean,
    mul,
    pointwise_activation,
    relu,
    reshape,
    resize_nearest,
    scale,
    sigmoid,
    soft_cross_entropy_sum,
    softmax,
    sum,
)

__all__ = [
    "BACKEND",
    "GraphError",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "batch_take",
    "concat_channels",
    "conv2d",
    "is_grad_enabled",
    "log_softmax",
    "mean",
    "mul",
    "no_grad",
    "pointwise_activation",
    "relu",
    "reshape",
    "resize_nearest",
    "scale",
    "sigmoid",
    "soft_cross_entropy_sum",
    "softmax",
    "sum",
]
