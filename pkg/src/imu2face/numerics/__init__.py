"""Minimal dense tensors, reverse-mode autodiff, network primitives and Adam."""
from .tensor import (
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cos,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    neg,
    norm,
    relu,
    reshape,
    sin,
    sqrt,
    square,
    sub,
    sum,
    transpose,
)
from .nn import (
    ConfigError,
    batch_norm,
    conv1d,
    dropout,
    layer_norm,
    linear,
    multi_head_attention,
    softmax,
)
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "ConfigError",
    "ShapeError",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "batch_norm",
    "concat",
    "conv1d",
    "cos",
    "div",
    "dropout",
    "exp",
    "getitem",
    "layer_norm",
    "linear",
    "log",
    "matmul",
    "mean",
    "mul",
    "multi_head_attention",
    "neg",
    "norm",
    "relu",
    "reshape",
    "sin",
    "softmax",
    "sqrt",
    "square",
    "sub",
    "sum",
    "transpose",
]
