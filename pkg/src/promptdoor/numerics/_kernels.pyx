# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im for strided 2-D convolution.

Loop order in col2im matches the numpy fallback (kernel offset outermost)
so both backends accumulate in the same order and agree bit for bit.
"""

import numpy as np
cimport numpy as cnp

ctypedef fused real:
    float
    double


def im2col(real[:, :, :, ::1] x, int k, int stride, int pad):
    cdef Py_ssize_t b = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((b * ho * wo, c * k * k), dtype=dtype)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t n, oy, ox, ch, i, j, iy, ix, row, col
    with nogil:
        for n in range(b):
            for oy in range(ho):
                for ox in range(wo):
                    row = (n * ho + oy) * wo + ox
                    for ch in range(c):
                        for i in range(k):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for j in range(k):
                                ix = ox * stride + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                col = (ch * k + i) * k + j
                                cols[row, col] = x[n, ch, iy, ix]
    return out


def col2im(real[:, ::1] cols, shape, int k, int stride, int pad):
    cdef Py_ssize_t b = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - k) // stride + 1
    dtype = np.float32 if real is float else np.float64
    out = np.zeros((b, c, h, w), dtype=dtype)
    cdef real[:, :, :, ::1] x = out
    cdef Py_ssize_t n, oy, ox, ch, i, j, iy, ix, row
    with nogil:
        for i in range(k):
            for j in range(k):
                for n in range(b):
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        if iy < 0 or iy >= h:
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            if ix < 0 or ix >= w:
                                continue
                            row = (n * ho + oy) * wo + ox
                            for ch in range(c):
                                x[n, ch, iy, ix] += cols[row, (ch * k + i) * k + j]
    return out
