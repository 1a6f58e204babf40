"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable op records its inputs and a backward rule on the
output tensor. Creation order is tracked by a global counter, so sorting
the ancestors of a loss by that counter gives a valid reverse topological
order without building an explicit tape object.

Broadcasting is deliberately narrow: equal shapes, scalar against any
shape, and a trailing block (``[d]`` or ``[L, d]``) against ``[..., d]`` /
``[..., L, d]``.
"""
import itertools
from contextlib import contextmanager

import numpy as np

from vidtext import kernels
from vidtext.errors import ContractError, DegenerateInputError, DomainError, ShapeError

_counter = itertools.count()
_grad_enabled = True

# Non-finite outputs raise immediately instead of propagating silently.
CHECK_FINITE = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id", "_consumed", "_op")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None
        self._id = next(_counter)
        self._consumed = False
        self._op = None

    # -- introspection ---------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- differentiation ---------------------------------------------------
    def backward(self):
        """Populate ``grad`` on every ancestor that requires it.

        A graph may be differentiated once; run a fresh forward pass
        before calling again.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")
        if self._consumed:
            raise ContractError("backward() already called on this graph; rebuild the forward pass")
        self._consumed = True

        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in nodes:
                continue
            nodes[node._id] = node
            for p in node._parents:
                if p.requires_grad and p._id not in nodes:
                    stack.append(p)

        grads = {self._id: np.ones_like(self.data)}
        for nid in sorted(nodes, reverse=True):
            node = nodes[nid]
            g = grads.pop(nid, None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._id in grads:
                    grads[parent._id] = grads[parent._id] + pg
                else:
                    grads[parent._id] = pg


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise DomainError(f"{op} produced a non-finite value")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_counter)
    out._consumed = False
    out._op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 and a.ndim <= 1 or b.size == 1 and b.ndim <= 1:
        return
    if len(sb) < len(sa) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sa) < len(sb) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{op}: cannot combine shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    # trailing block against a batched operand
    return g.reshape((-1,) + tuple(shape)).sum(axis=0)


# -- elementwise binary --------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), backward, "div")


def scale(x, c):
    """Multiply by a constant that carries no gradient."""
    c = float(c)
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


# -- elementwise unary ---------------------------------------------------
def exp(x):
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x):
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def relu(x):
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def gelu(x):
    """Tanh-approximated GELU."""
    xd = x.data
    return _make(kernels.gelu(xd), (x,), lambda g: (kernels.gelu_backward(xd, g),), "gelu")


def minimum(x, c):
    """Clamp from above at constant ``c``; gradient is zero where clamped."""
    keep = x.data < c
    return _make(np.minimum(x.data, c), (x,), lambda g: (g * keep,), "minimum")


# -- reductions ----------------------------------------------------------
def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "sum")


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else x.shape[axis]
    shape = x.shape
    out = x.data.mean(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, shape).copy(),)

    return _make(np.asarray(out), (x,), backward, "mean")


# -- structural ----------------------------------------------------------
def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tensors, backward, "concat")


def slice_axis(x, start, stop, axis=0):
    ax = axis % x.ndim
    index = [slice(None)] * x.ndim
    index[ax] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _make(x.data[index].copy(), (x,), backward, "slice")


def slice_rows(x, start, stop):
    return slice_axis(x, start, stop, axis=0)


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def permute(x, axes):
    inv = np.argsort(axes)
    return _make(np.ascontiguousarray(x.data.transpose(axes)), (x,), lambda g: (g.transpose(inv),), "permute")


def transpose(x):
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs rank >= 2, got shape {x.shape}")
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return permute(x, axes)


def take(x, indices, axis=0):
    """Gather along axis 0; repeated indices accumulate their gradient."""
    if axis != 0:
        raise ShapeError("take only gathers along axis 0")
    idx = np.asarray(indices, dtype=np.intp)
    n = x.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take: index out of range for axis of length {n}")
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return _make(x.data[idx], (x,), backward, "take")


def matmul(a, b):
    """Matrix product over the last two axes.

    ``b`` may be 2-D against a batched ``a``; otherwise leading (batch)
    axes must match exactly.
    """
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    if a.ndim < 2 or b.ndim < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul: shapes {sa} and {sb} are not aligned")
    if b.ndim > 2 and sa[:-2] != sb[:-2]:
        raise ShapeError(f"matmul: batch dimensions of {sa} and {sb} differ")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: cannot batch right operand {sb} against 2-D {sa}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, sa[-1]).T @ g.reshape(-1, sb[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


# -- row kernels ---------------------------------------------------------
def _to_rows(arr, axis):
    moved = np.moveaxis(arr, axis, -1)
    return np.ascontiguousarray(moved).reshape(-1, moved.shape[-1]), moved.shape


def _from_rows(rows, moved_shape, axis):
    return np.moveaxis(rows.reshape(moved_shape), -1, axis)


def softmax(x, axis=-1, mask=None):
    """Numerically stable softmax along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) marks the entries allowed to
    receive probability; masked entries come out exactly zero.
    """
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} out of range for shape {x.shape}")
    rows, moved = _to_rows(x.data, axis)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        mrows, _ = _to_rows(m.astype(np.uint8), axis)
        if not mrows.any(axis=1).all():
            raise DegenerateInputError("softmax mask leaves a slice with no valid entry")
        yrows = kernels.softmax_rows(rows, mrows)
    else:
        yrows = kernels.softmax_rows(rows)

    def backward(g):
        grows, _ = _to_rows(g, axis)
        return (_from_rows(kernels.softmax_rows_backward(yrows, grows), moved, axis),)

    return _make(_from_rows(yrows, moved, axis), (x,), backward, "softmax")


def log_softmax(x, axis=-1):
    rows, moved = _to_rows(x.data, axis)
    yrows = kernels.log_softmax_rows(rows)

    def backward(g):
        grows, _ = _to_rows(g, axis)
        return (_from_rows(kernels.log_softmax_rows_backward(yrows, grows), moved, axis),)

    return _make(_from_rows(yrows, moved, axis), (x,), backward, "log_softmax")


def layer_norm(x, gain, bias, eps=1e-5):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: last dim {d} does not match gain {gain.shape} / bias {bias.shape}")
    shape = x.shape
    rows = np.ascontiguousarray(x.data).reshape(-1, d)
    y, xhat, rstd = kernels.layer_norm_rows(rows, gain.data, bias.data, float(eps))
    gd = gain.data

    def backward(g):
        gx, gg, gb = kernels.layer_norm_rows_backward(np.ascontiguousarray(g).reshape(-1, d), xhat, rstd, gd)
        return gx.reshape(shape), gg, gb

    return _make(y.reshape(shape), (x, gain, bias), backward, "layer_norm")


def l2_normalize(x, axis=-1):
    """Scale each slice along ``axis`` to unit Euclidean norm."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm == 0):
        raise DegenerateInputError("l2_normalize: zero-norm slice")
    y = x.data / norm

    def backward(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _make(y, (x,), backward, "l2_normalize")
