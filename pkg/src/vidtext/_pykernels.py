"""Numpy implementations of the row-wise kernels.

Every function takes C-contiguous float64 arrays; row kernels operate on
2-D ``[rows, n]`` input. ``_ckernels.pyx`` mirrors this module one to one.
"""
import numpy as np

BACKEND = "python"

_GELU_C = np.sqrt(2.0 / np.pi)


def softmax_rows(x, mask=None):
    if mask is None:
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
    else:
        valid = mask.astype(bool)
        m = np.where(valid, x, -np.inf).max(axis=1, keepdims=True)
        e = np.where(valid, np.exp(np.where(valid, x - m, 0.0)), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_backward(y, gy):
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


def log_softmax_rows(x):
    z = x - x.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def log_softmax_rows_backward(y, gy):
    return gy - np.exp(y) * gy.sum(axis=1, keepdims=True)


def layer_norm_rows(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0].copy()


def layer_norm_rows_backward(gy, xhat, rstd, gain):
    gg = (gy * xhat).sum(axis=0)
    gb = gy.sum(axis=0)
    gxhat = gy * gain
    n = xhat.shape[1]
    gx = (rstd[:, None] / n) * (
        n * gxhat
        - gxhat.sum(axis=1, keepdims=True)
        - xhat * (gxhat * xhat).sum(axis=1, keepdims=True)
    )
    return gx, gg, gb


def gelu(x):
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_backward(x, gy):
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
