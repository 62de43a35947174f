"""Tensor arithmetic with reverse-mode autodiff, layers, and checkpoints."""
from .checkpoint import load_tensors, save_tensors
from .nn import MLP, LayerNorm, Linear, Module, parameter
from .tensor import (
    NEG_INF,
    Tensor,
    abs_,
    add,
    as_tensor,
    attention_chunked,
    broadcast_to,
    clip,
    concat,
    cos,
    div,
    embedding_lookup,
    exp,
    gelu,
    get_default_dtype,
    getitem,
    index_update,
    inv,
    is_grad_enabled,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    no_grad,
    power,
    precision,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scaled_dot_product_attention,
    set_default_dtype,
    sigmoid,
    sin,
    slice_,
    softmax,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    swapaxes,
    tanh,
    tensor,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
