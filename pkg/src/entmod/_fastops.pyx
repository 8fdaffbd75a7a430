# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled row-wise kernels for the encoder hot loop.

Same contracts as ``_kernels_py``: C-contiguous 2-D float32/float64
arrays, normalization along the last axis, double-precision accumulation.
"""

from libc.math cimport exp, sqrt, tanh

import numpy as np

ctypedef fused real:
    float
    double

_GELU_C = 0.7978845608028654
_GELU_A = 0.044715

NAME = "compiled"


def layer_norm_forward(real[:, ::1] x, real[::1] gain, real[::1] bias, double eps):
    cdef Py_ssize_t rows = x.shape[0], dim = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc, m, v, r
    out = np.empty((rows, dim), dtype=np.asarray(x).dtype)
    mean = np.empty(rows, dtype=np.asarray(x).dtype)
    rstd = np.empty(rows, dtype=np.asarray(x).dtype)
    cdef real[:, ::1] y = out
    cdef real[::1] mu = mean
    cdef real[::1] rs = rstd
    with nogil:
        for i in range(rows):
            acc = 0.0
            for j in range(dim):
                acc += x[i, j]
            m = acc / dim
            acc = 0.0
            for j in range(dim):
                acc += (x[i, j] - m) * (x[i, j] - m)
            v = acc / dim
            r = 1.0 / sqrt(v + eps)
            mu[i] = <real> m
            rs[i] = <real> r
            for j in range(dim):
                y[i, j] = <real> (((x[i, j] - m) * r) * gain[j] + bias[j])
    return out, mean, rstd


def layer_norm_backward(real[:, ::1] dy, real[:, ::1] x, real[::1] gain,
                        real[::1] mean, real[::1] rstd):
    cdef Py_ssize_t rows = x.shape[0], dim = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double m, r, xhat, dxh, s1, s2
    dtype = np.asarray(x).dtype
    dx_arr = np.empty((rows, dim), dtype=dtype)
    dgain_arr = np.zeros(dim, dtype=dtype)
    dbias_arr = np.zeros(dim, dtype=dtype)
    cdef real[:, ::1] dx = dx_arr
    cdef real[::1] dgain = dgain_arr
    cdef real[::1] dbias = dbias_arr
    with nogil:
        for i in range(rows):
            m = mean[i]
            r = rstd[i]
            s1 = 0.0
            s2 = 0.0
            for j in range(dim):
                xhat = (x[i, j] - m) * r
                dxh = dy[i, j] * gain[j]
                s1 += dxh
                s2 += dxh * xhat
                dgain[j] += <real> (dy[i, j] * xhat)
                dbias[j] += dy[i, j]
            s1 /= dim
            s2 /= dim
            for j in range(dim):
                xhat = (x[i, j] - m) * r
                dxh = dy[i, j] * gain[j]
                dx[i, j] = <real> (r * (dxh - s1 - xhat * s2))
    return dx_arr, dgain_arr, dbias_arr


def softmax_forward(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], dim = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double mx, acc
    out = np.empty((rows, dim), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] p = out
    with nogil:
        for i in range(rows):
            mx = x[i, 0]
            for j in range(1, dim):
                if x[i, j] > mx:
                    mx = x[i, j]
            acc = 0.0
            for j in range(dim):
                p[i, j] = <real> exp(x[i, j] - mx)
                acc += p[i, j]
            for j in range(dim):
                p[i, j] = <real> (p[i, j] / acc)
    return out


def softmax_backward(real[:, ::1] dp, real[:, ::1] p):
    cdef Py_ssize_t rows = p.shape[0], dim = p.shape[1]
    cdef Py_ssize_t i, j
    cdef double inner
    out = np.empty((rows, dim), dtype=np.asarray(p).dtype)
    cdef real[:, ::1] dx = out
    with nogil:
        for i in range(rows):
            inner = 0.0
            for j in range(dim):
                inner += dp[i, j] * p[i, j]
            for j in range(dim):
                dx[i, j] = <real> (p[i, j] * (dp[i, j] - inner))
    return out


def gelu_forward(real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], dim = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double u, c = _GELU_C, a = _GELU_A
    out = np.empty((rows, dim), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] y = out
    with nogil:
        for i in range(rows):
            for j in range(dim):
                u = c * (x[i, j] + a * x[i, j] * x[i, j] * x[i, j])
                y[i, j] = <real> (0.5 * x[i, j] * (1.0 + tanh(u)))
    return out


def gelu_backward(real[:, ::1] dy, real[:, ::1] x):
    cdef Py_ssize_t rows = x.shape[0], dim = x.shape[1]
    cdef Py_ssize_t i, j
    cdef double u, t, du, c = _GELU_C, a = _GELU_A
    out = np.empty((rows, dim), dtype=np.asarray(x).dtype)
    cdef real[:, ::1] dx = out
    with nogil:
        for i in range(rows):
            for j in range(dim):
                u = c * (x[i, j] + a * x[i, j] * x[i, j] * x[i, j])
                t = tanh(u)
                du = c * (1.0 + 3.0 * a * x[i, j] * x[i, j])
                dx[i, j] = <real> (dy[i, j] * (0.5 * (1.0 + t) + 0.5 * x[i, j] * (1.0 - t * t) * du))
    return out
