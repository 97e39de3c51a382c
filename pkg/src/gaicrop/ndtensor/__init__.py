from .core import (
    Tensor,
    TensorError,
    backward,
    batched_bilinear_sample,
    bilinear_sample,
    concat_channels,
    conv1x1_reduce,
    conv2d,
    flatten,
    fully_connected,
    grid_bilinear_sample,
    huber_loss,
    mean_all,
    mul_mask,
    outer_grid_sample,
    relu,
    reshape,
    stack_rows,
)
from .optim import AdamState, adam_step, zero_grads
from .serialize import ContainerError, load_tensors, save_tensors
from .check import GradCheckReport, finite_diff_check

__all__ = [
    "Tensor", "TensorError", "backward", "batched_bilinear_sample", "bilinear_sample", "concat_channels",
    "conv1x1_reduce", "conv2d", "flatten", "fully_connected",
    "grid_bilinear_sample", "huber_loss", "mean_all", "mul_mask",
    "outer_grid_sample", "relu",
    "reshape", "stack_rows", "AdamState", "adam_step", "zero_grads", "ContainerError",
    "load_tensors", "save_tensors", "GradCheckReport", "finite_diff_check",
]
