"""Minimal dense tensor engine: kernels, reverse-mode backward, Adam, checkpoints."""

from .checkpoint import CheckpointError, decode_tensors, encode_tensors, parse_checkpoint, serialize_checkpoint
from .optim import ParameterSet, adam_step
from .tensor import (
    NonFiniteError,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    avg_pool2d,
    backward,
    bce_with_logits,
    concat,
    conv2d,
    depth_to_space,
    div,
    exp,
    getitem,
    grad_enabled,
    log,
    log_softmax,
    matmul,
    max_pool2d,
    maximum,
    mean,
    mul,
    no_grad,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    space_to_depth,
    sqrt,
    sub,
    tanh,
    tmax,
    transpose,
    tsum,
    upsample_nearest,
)

__all__ = [name for name in dir() if not name.startswith("_")]
