from vidtext.autodiff.gradcheck import grad_check
from vidtext.autodiff.tensor import (
    Tensor,
    add,
    as_tensor,
    concat,
    div,
    exp,
    gelu,
    is_grad_enabled,
    l2_normalize,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    minimum,
    mul,
    no_grad,
    permute,
    relu,
    reshape,
    scale,
    slice_axis,
    slice_rows,
    softmax,
    sub,
    sum,
    take,
    transpose,
)

__all__ = [
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "div",
    "exp",
    "gelu",
    "grad_check",
    "is_grad_enabled",
    "l2_normalize",
    "layer_norm",
    "log",
    "log_softmax",
    "matmul",
    "mean",
    "minimum",
    "mul",
    "no_grad",
    "permute",
    "relu",
    "reshape",
    "scale",
    "slice_axis",
    "slice_rows",
    "softmax",
    "sub",
    "sum",
    "take",
    "transpose",
]
