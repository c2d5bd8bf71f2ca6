"""Minimal reverse-mode autodiff engine for the MCTA network."""

from mcta.autograd.ops import (
    BatchNormState,
    activation,
    add,
    batchnorm,
    conv2d,
    divide,
    dropout,
    elu,
    hadamard,
    linear,
    maxpool2d,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    softmax_cross_entropy,
    sum_all,
)
from mcta.autograd.optim import Adam, AdamState, adam_step
from mcta.autograd.tensor import Tensor, default_dtype, get_default_dtype, no_grad, set_default_dtype

__all__ = [
    "Adam",
    "AdamState",
    "BatchNormState",
    "Tensor",
    "activation",
    "adam_step",
    "add",
    "batchnorm",
    "conv2d",
    "default_dtype",
    "divide",
    "dropout",
    "elu",
    "get_default_dtype",
    "hadamard",
    "linear",
    "maxpool2d",
    "no_grad",
    "reduce_sum",
    "relu",
    "reshape",
    "set_default_dtype",
    "sigmoid",
    "softmax_cross_entropy",
    "sum_all",
]
