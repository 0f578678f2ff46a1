from . import ops
from .gradcheck import grad_check
from .ops import (
    RunningStats,
    abs,
    activation,
    add,
    channel_norm,
    concat_channels,
    conv2d,
    conv_output_extent,
    conv_transpose2d,
    conv_transpose_output_extent,
    dropout,
    leaky_relu,
    log,
    mul,
    neg,
    reduce_mean,
    relu,
    scalar_mul,
    sigmoid,
    slice_channels,
    softplus,
    stack_batch,
    sub,
    tanh,
)
from .tensor import GradientMap, Rng, ShapeError, Tape, Tensor, backward

__all__ = [
    "GradientMap", "Rng", "RunningStats", "ShapeError", "Tape", "Tensor", "abs", "activation",
    "add", "backward", "channel_norm", "concat_channels", "conv2d", "conv_output_extent",
    "conv_transpose2d", "conv_transpose_output_extent", "dropout", "grad_check", "leaky_relu",
    "log", "mul", "neg", "ops", "reduce_mean", "relu", "scalar_mul", "sigmoid", "slice_channels",
    "softplus", "stack_batch", "sub", "tanh",
]
