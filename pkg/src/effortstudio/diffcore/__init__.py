"""Differentiable computation core: tape, gradient checking, Adam, checkpoints."""

from .check import GradCheckReport, TensorCheck, grad_check
from .checkpoint import checkpoint_sha256, load_checkpoint, save_checkpoint
from .optim import AdamState, adam_step
from .rng import RngStream
from .tape import (
    ParamTensor,
    Params,
    Var,
    clip,
    concat,
    evaluate,
    exp,
    grad,
    leaf_vars,
    log,
    log_softmax,
    matmul,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax,
    square,
    take,
    tanh,
)

__all__ = [
    "AdamState",
    "GradCheckReport",
    "ParamTensor",
    "Params",
    "RngStream",
    "TensorCheck",
    "Var",
    "adam_step",
    "checkpoint_sha256",
    "clip",
    "concat",
    "evaluate",
    "exp",
    "grad",
    "grad_check",
    "leaf_vars",
    "load_checkpoint",
    "log",
    "log_softmax",
    "matmul",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "softmax",
    "square",
    "take",
    "tanh",
]
