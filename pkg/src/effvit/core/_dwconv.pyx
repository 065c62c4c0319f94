# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled depthwise-convolution kernels.

Inputs are already padded. Loop order over kernel taps matches the numpy
fallback so both backends accumulate in the same sequence.
"""

import numpy as np
from cython cimport floating


def dw_forward(floating[:, :, :, ::1] xp, floating[:, :, ::1] w, Py_ssize_t stride,
               Py_ssize_t ho, Py_ssize_t wo):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1], kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t b, c, i, j, p, q
    cdef floating acc
    if floating is float:
        out = np.empty((B, C, ho, wo), dtype=np.float32)
    else:
        out = np.empty((B, C, ho, wo), dtype=np.float64)
    cdef floating[:, :, :, ::1] y = out
    with nogil:
        for b in range(B):
            for c in range(C):
                for i in range(ho):
                    for j in range(wo):
                        acc = 0
                        for p in range(kh):
                            for q in range(kw):
                                acc = acc + xp[b, c, i * stride + p, j * stride + q] * w[c, p, q]
                        y[b, c, i, j] = acc
    return out


def dw_backward_input(floating[:, :, :, ::1] g, floating[:, :, ::1] w, Py_ssize_t stride,
                      Py_ssize_t hp, Py_ssize_t wp):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t kh = w.shape[1], kw = w.shape[2]
    cdef Py_ssize_t b, c, i, j, p, q
    cdef floating wv
    if floating is float:
        out = np.zeros((B, C, hp, wp), dtype=np.float32)
    else:
        out = np.zeros((B, C, hp, wp), dtype=np.float64)
    cdef floating[:, :, :, ::1] gx = out
    with nogil:
        for p in range(kh):
            for q in range(kw):
                for b in range(B):
                    for c in range(C):
                        wv = w[c, p, q]
                        for i in range(ho):
                            for j in range(wo):
                                gx[b, c, i * stride + p, j * stride + q] += g[b, c, i, j] * wv
    return out


def dw_backward_weight(floating[:, :, :, ::1] g, floating[:, :, :, ::1] xp, Py_ssize_t stride,
                       Py_ssize_t kh, Py_ssize_t kw):
    cdef Py_ssize_t B = g.shape[0], C = g.shape[1], ho = g.shape[2], wo = g.shape[3]
    cdef Py_ssize_t b, c, i, j, p, q
    cdef floating acc
    if floating is float:
        out = np.empty((C, kh, kw), dtype=np.float32)
    else:
        out = np.empty((C, kh, kw), dtype=np.float64)
    cdef floating[:, :, ::1] gw = out
    with nogil:
        for c in range(C):
            for p in range(kh):
                for q in range(kw):
                    acc = 0
                    for b in range(B):
                        for i in range(ho):
                            for j in range(wo):
                                acc = acc + g[b, c, i, j] * xp[b, c, i * stride + p, j * stride + q]
                    gw[c, p, q] = acc
    return out
