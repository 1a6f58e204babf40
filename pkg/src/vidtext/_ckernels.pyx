# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled row-wise kernels; drop-in twin of ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh, INFINITY

cnp.import_array()

BACKEND = "compiled"

cdef double _GELU_C = 0.7978845608028654


def softmax_rows(const double[:, ::1] x, const unsigned char[:, ::1] mask=None):
    cdef Py_ssize_t r, c, rows = x.shape[0], n = x.shape[1]
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double m, s
    for r in range(rows):
        m = -INFINITY
        if mask is None:
            for c in range(n):
                if x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(n):
                y[r, c] = exp(x[r, c] - m)
                s += y[r, c]
        else:
            for c in range(n):
                if mask[r, c] and x[r, c] > m:
                    m = x[r, c]
            s = 0.0
            for c in range(n):
                if mask[r, c]:
                    y[r, c] = exp(x[r, c] - m)
                    s += y[r, c]
                else:
                    y[r, c] = 0.0
        for c in range(n):
            y[r, c] /= s
    return out


def softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t r, c, rows = y.shape[0], n = y.shape[1]
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double d
    for r in range(rows):
        d = 0.0
        for c in range(n):
            d += gy[r, c] * y[r, c]
        for c in range(n):
            gx[r, c] = y[r, c] * (gy[r, c] - d)
    return out


def log_softmax_rows(const double[:, ::1] x):
    cdef Py_ssize_t r, c, rows = x.shape[0], n = x.shape[1]
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double m, s, ls
    for r in range(rows):
        m = -INFINITY
        for c in range(n):
            if x[r, c] > m:
                m = x[r, c]
        s = 0.0
        for c in range(n):
            s += exp(x[r, c] - m)
        ls = log(s)
        for c in range(n):
            y[r, c] = (x[r, c] - m) - ls
    return out


def log_softmax_rows_backward(const double[:, ::1] y, const double[:, ::1] gy):
    cdef Py_ssize_t r, c, rows = y.shape[0], n = y.shape[1]
    out = np.empty((rows, n), dtype=np.float64)
    cdef double[:, ::1] gx = out
    cdef double s
    for r in range(rows):
        s = 0.0
        for c in range(n):
            s += gy[r, c]
        for c in range(n):
            gx[r, c] = gy[r, c] - exp(y[r, c]) * s
    return out


def layer_norm_rows(const double[:, ::1] x, const double[::1] gain,
                    const double[::1] bias, double eps):
    cdef Py_ssize_t r, c, rows = x.shape[0], n = x.shape[1]
    out = np.empty((rows, n), dtype=np.float64)
    xhat_arr = np.empty((rows, n), dtype=np.float64)
    rstd_arr = np.empty(rows, dtype=np.float64)
    cdef double[:, ::1] y = out
    cdef double[:, ::1] xh = xhat_arr
    cdef double[::1] rs = rstd_arr
    cdef double mu, var, d, inv
    for r in range(rows):
        mu = 0.0
        for c in range(n):
            mu += x[r, c]
        mu /= n
        var = 0.0
        for c in range(n):
            d = x[r, c] - mu
            var += d * d
        var /= n
        inv = 1.0 / sqrt(var + eps)
        rs[r] = inv
        for c in range(n):
            xh[r, c] = (x[r, c] - mu) * inv
            y[r, c] = xh[r, c] * gain[c] + bias[c]
    return out, xhat_arr, rstd_arr


def layer_norm_rows_backward(const double[:, ::1] gy, const double[:, ::1] xhat,
                             const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t r, c, rows = gy.shape[0], n = gy.shape[1]
    gx_arr = np.empty((rows, n), dtype=np.float64)
    gg_arr = np.zeros(n, dtype=np.float64)
    gb_arr = np.zeros(n, dtype=np.float64)
    cdef double[:, ::1] gx = gx_arr
    cdef double[::1] gg = gg_arr
    cdef double[::1] gb = gb_arr
    cdef double s1, s2, g
    for r in range(rows):
        s1 = 0.0
        s2 = 0.0
        for c in range(n):
            g = gy[r, c] * gain[c]
            s1 += g
            s2 += g * xhat[r, c]
            gg[c] += gy[r, c] * xhat[r, c]
            gb[c] += gy[r, c]
        for c in range(n):
            g = gy[r, c] * gain[c]
            gx[r, c] = (rstd[r] / n) * (n * g - s1 - xhat[r, c] * s2)
    return gx_arr, gg_arr, gb_arr


def gelu(x):
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    cdef const double[::1] xv = flat
    cdef double[::1] yv = out
    cdef Py_ssize_t i
    cdef double a
    for i in range(xv.shape[0]):
        a = xv[i]
        yv[i] = 0.5 * a * (1.0 + tanh(_GELU_C * (a + 0.044715 * a * a * a)))
    return out.reshape(np.shape(x))


def gelu_backward(x, gy):
    flat = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    gflat = np.ascontiguousarray(gy, dtype=np.float64).reshape(-1)
    out = np.empty_like(flat)
    cdef const double[::1] xv = flat
    cdef const double[::1] gv = gflat
    cdef double[::1] yv = out
    cdef Py_ssize_t i
    cdef double a, t, du
    for i in range(xv.shape[0]):
        a = xv[i]
        t = tanh(_GELU_C * (a + 0.044715 * a * a * a))
        du = _GELU_C * (1.0 + 3 * 0.044715 * a * a)
        yv[i] = gv[i] * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du)
    return out.reshape(np.shape(x))
