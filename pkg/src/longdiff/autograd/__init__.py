from . import functional
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .functional import conv2d, conv_transpose2d, sort, sort_with_backward
from .gradcheck import check_gradients, numerical_grad, rel_error
from .nn import Conv2d, ConvTranspose2d, GroupNorm, LayerNorm, Linear, Module, hash_parameters
from .optim import Adam, AdamState, adam_step
from .tensor import (
    GraphError,
    NonFiniteError,
    Parameter,
    ShapeError,
    Tape,
    Tensor,
    abs_,
    add,
    amax,
    as_tensor,
    broadcast_to,
    concat,
    div,
    exp,
    flip,
    getitem,
    grad_enabled,
    leaky_relu,
    log,
    logsigmoid,
    make_op,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    pad,
    power,
    relu,
    reshape,
    sigmoid,
    silu,
    softmax,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    swapaxes,
    tanh,
    transpose,
    tsum,
    where,
)
