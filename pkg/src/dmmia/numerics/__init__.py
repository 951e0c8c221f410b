"""Minimal float64 tensor engine: autodiff, seeded sampling, Adam."""

from .optim import AdamState, adam_step, step_params
from .rng import Rng, sample_latents
from .tensor import (
    Tensor,
    add,
    affine,
    as_tensor,
    backward,
    cross_entropy,
    div,
    exp,
    gather,
    l2_norm,
    log_softmax,
    logsumexp,
    matmul,
    mean,
    mul,
    neg,
    relu,
    reshape,
    scale,
    sigmoid,
    softplus,
    softmax,
    sub,
    sum,
    take_cols,
    tanh,
    zero_grad,
)

__all__ = [
    "AdamState",
    "Rng",
    "Tensor",
    "adam_step",
    "add",
    "affine",
    "as_tensor",
    "backward",
    "cross_entropy",
    "div",
    "exp",
    "gather",
    "l2_norm",
    "log_softmax",
    "logsumexp",
    "matmul",
    "mean",
    "mul",
    "neg",
    "relu",
    "reshape",
    "sample_latents",
    "scale",
    "sigmoid",
    "softmax",
    "softplus",
    "step_params",
    "sub",
    "sum",
    "take_cols",
    "tanh",
    "zero_grad",
]
