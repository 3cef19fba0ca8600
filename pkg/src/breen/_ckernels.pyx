# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled attention kernels: fused scale + causal mask + softmax, and its backward.

Both work on C-contiguous (N, L, L) arrays and skip the masked upper triangle.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport exp, expf

cnp.import_array()


cdef inline floating _exp(floating x) noexcept nogil:
    if floating is float:
        return expf(x)
    else:
        return exp(x)


def causal_softmax_forward(floating[:, :, ::1] x, double scale, floating[:, :, ::1] out):
    cdef Py_ssize_t n = x.shape[0], length = x.shape[1]
    cdef Py_ssize_t b, i, j
    cdef floating m, s, v, sc = <floating>scale
    with nogil:
        for b in range(n):
            for i in range(length):
                m = x[b, i, 0] * sc
                for j in range(1, i + 1):
                    v = x[b, i, j] * sc
                    if v > m:
                        m = v
                for j in range(i + 1):
                    out[b, i, j] = x[b, i, j] * sc - m
                # kept as a bare loop so the compiler can vectorize the exp
                for j in range(i + 1):
                    out[b, i, j] = _exp(out[b, i, j])
                s = 0
                for j in range(i + 1):
                    s = s + out[b, i, j]
                s = 1 / s
                for j in range(i + 1):
                    out[b, i, j] = out[b, i, j] * s
                for j in range(i + 1, length):
                    out[b, i, j] = 0


def causal_softmax_backward(floating[:, :, ::1] p, floating[:, :, ::1] g, double scale, floating[:, :, ::1] out):
    cdef Py_ssize_t n = p.shape[0], length = p.shape[1]
    cdef Py_ssize_t b, i, j
    cdef floating d, sc = <floating>scale
    with nogil:
        for b in range(n):
            for i in range(length):
                d = 0
                for j in range(i + 1):
                    d = d + g[b, i, j] * p[b, i, j]
                for j in range(i + 1):
                    out[b, i, j] = p[b, i, j] * (g[b, i, j] - d) * sc
                for j in range(i + 1, length):
                    out[b, i, j] = 0
