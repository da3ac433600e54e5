from .dump import dumps, loads, read_tensor, write_tensor
from .rng import RngStream, sample_gaussian
from .tensor import (
    LOG_FLOOR,
    ShapeError,
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    bilinear_upsample,
    concat,
    conv2d,
    conv_output_size,
    div,
    leaky_relu,
    log,
    max_pool2d,
    mean,
    mul,
    relu,
    sigmoid,
    softmax_channels,
    square,
    sub,
    sum,
    take,
)

__all__ = [
    "LOG_FLOOR", "RngStream", "ShapeError", "Tape", "Tensor", "active_tape", "add",
    "backward", "bilinear_upsample", "concat", "conv2d", "conv_output_size", "div", "dumps",
    "leaky_relu", "loads", "log", "max_pool2d", "mean", "mul", "read_tensor", "relu",
    "sample_gaussian", "sigmoid", "softmax_channels", "square", "sub", "sum", "take",
    "write_tensor",
]
