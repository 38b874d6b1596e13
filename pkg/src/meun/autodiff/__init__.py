"""Dense tensor engine with reverse-mode automatic differentiation."""
from meun.autodiff.ops import (
    add,
    batchnorm2d,
    channel_scale,
    concat_channels,
    conv2d,
    global_avg_pool,
    interp_matrix,
    linear,
    maxpool2,
    mul,
    relu,
    sigmoid,
    sum_all,
    upsample_bilinear,
    weighted_sum,
)
from meun.autodiff.tensor import Parameter, Tape, Tensor, backward, get_tape, no_grad, record

__all__ = [
    "Parameter", "Tape", "Tensor", "add", "backward", "batchnorm2d", "channel_scale",
    "concat_channels", "conv2d", "get_tape", "global_avg_pool", "interp_matrix", "linear",
    "maxpool2", "mul", "no_grad", "record", "relu", "sigmoid", "sum_all",
    "upsample_bilinear", "weighted_sum",
]
