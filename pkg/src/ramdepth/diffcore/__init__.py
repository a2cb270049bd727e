from .tensor import Tensor, Tape, no_grad, backward, record_op, active_tape, set_check_finite
from .checkpoint import save_checkpoint, load_checkpoint, CheckpointError
from . import ops
from .ops import (
    add, sub, mul, neg, scalar_mul, scalar_add,
    concat, reshape, transpose, tile_batch, sum_axis, sum_all, absolute, clamp_min,
    activation, relu, sigmoid, tanh, softmax,
    conv2d, norm2d, grid_sample_bilinear, GRUParams, conv_gru,
)

__all__ = [
    "Tensor", "Tape", "no_grad", "backward", "record_op", "active_tape",
    "set_check_finite",
    "save_checkpoint", "load_checkpoint", "CheckpointError",
    "ops",
    "add", "sub", "mul", "neg", "scalar_mul", "scalar_add",
    "concat", "reshape", "transpose", "tile_batch", "sum_axis", "sum_all", "absolute",
    "clamp_min", "activation", "relu", "sigmoid", "tanh", "softmax",
    "conv2d", "norm2d", "grid_sample_bilinear", "GRUParams", "conv_gru",
]
