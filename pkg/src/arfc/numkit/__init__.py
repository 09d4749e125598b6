"""Minimal dense-tensor kernel: autodiff, layers, AdamW and counter-based RNG."""

from .nn import (
    LayerParams,
    block_param_count,
    causal_mask,
    dropout,
    ffn,
    gelu,
    init_block,
    init_layer_norm,
    init_linear,
    layer_norm,
    mhsa,
    mhsa_cached,
    softmax_lastdim,
    transformer_block,
    transformer_block_cached,
    xavier_uniform,
)
from .optim import AdamW, MissingGradError, clip_grad_norm, sgd_adamw_step
from .rng import Rng
from .tensor import (
    NumericalError,
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    getitem,
    linear,
    matmul,
    mean,
    mul,
    no_grad,
    power,
    reshape,
    sqrt,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
)

__all__ = [
    "AdamW",
    "LayerParams",
    "MissingGradError",
    "NumericalError",
    "Rng",
    "Tensor",
    "add",
    "as_tensor",
    "block_param_count",
    "causal_mask",
    "clip_grad_norm",
    "concat",
    "div",
    "dropout",
    "exp",
    "ffn",
    "gelu",
    "getitem",
    "init_block",
    "init_layer_norm",
    "init_linear",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mhsa",
    "mhsa_cached",
    "mul",
    "no_grad",
    "power",
    "reshape",
    "sgd_adamw_step",
    "softmax_lastdim",
    "sqrt",
    "stack",
    "sub",
    "swapaxes",
    "tanh",
    "transformer_block",
    "transformer_block_cached",
    "transpose",
    "tsum",
    "xavier_uniform",
]
