# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for the convolution and pooling kernels.

Mirrors :mod:`xflow._pykernels` function for function; results are
bit-identical to the pure-Python backend.
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


def im2col(const double[:, :, :, ::1] x, int kh, int kw):
    """[N, C, H, W] -> [N, C*kh*kw, Ho*Wo] patch matrix (valid windows)."""
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1]
    cdef Py_ssize_t height = x.shape[2], width = x.shape[3]
    cdef Py_ssize_t ho = height - kh + 1, wo = width - kw + 1
    cols_arr = np.empty((n_batch, channels * kh * kw, ho * wo), dtype=np.float64)
    cdef double[:, :, ::1] cols = cols_arr
    cdef Py_ssize_t n, c, i, j, y, xx, row, base
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for y in range(ho):
                            base = y * wo
                            for xx in range(wo):
                                cols[n, row, base + xx] = x[n, c, y + i, j + xx]
    return cols_arr


def col2im(const double[:, :, ::1] cols, int channels, int height, int width,
           int kh, int kw):
    """Scatter-add a patch matrix back onto a zeroed [N, C, H, W] image."""
    cdef Py_ssize_t n_batch = cols.shape[0]
    cdef Py_ssize_t ho = height - kh + 1, wo = width - kw + 1
    out_arr = np.zeros((n_batch, channels, height, width), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, i, j, y, xx, row
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for i in range(kh):
                    for j in range(kw):
                        row = (c * kh + i) * kw + j
                        for y in range(ho):
                            for xx in range(wo):
                                out[n, c, y + i, xx + j] += cols[n, row, y * wo + xx]
    return out_arr


def maxpool2x2(const double[:, :, :, ::1] x):
    """2x2/stride-2 max pool; ties resolve to the first position in row-major order."""
    cdef Py_ssize_t n_batch = x.shape[0], channels = x.shape[1]
    cdef Py_ssize_t ho = x.shape[2] // 2, wo = x.shape[3] // 2
    out_arr = np.empty((n_batch, channels, ho, wo), dtype=np.float64)
    idx_arr = np.empty((n_batch, channels, ho, wo), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t n, c, y, xx
    cdef double best, v
    cdef cnp.int8_t arg
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for y in range(ho):
                    for xx in range(wo):
                        best = x[n, c, 2 * y, 2 * xx]
                        arg = 0
                        v = x[n, c, 2 * y, 2 * xx + 1]
                        if v > best:
                            best = v
                            arg = 1
                        v = x[n, c, 2 * y + 1, 2 * xx]
                        if v > best:
                            best = v
                            arg = 2
                        v = x[n, c, 2 * y + 1, 2 * xx + 1]
                        if v > best:
                            best = v
                            arg = 3
                        out[n, c, y, xx] = best
                        idx[n, c, y, xx] = arg
    return out_arr, idx_arr


def maxpool2x2_backward(const double[:, :, :, ::1] grad,
                        const cnp.int8_t[:, :, :, ::1] idx):
    """Route each pooled gradient to its recorded argmax position."""
    cdef Py_ssize_t n_batch = grad.shape[0], channels = grad.shape[1]
    cdef Py_ssize_t ho = grad.shape[2], wo = grad.shape[3]
    out_arr = np.zeros((n_batch, channels, 2 * ho, 2 * wo), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, c, y, xx
    cdef int a
    with nogil:
        for n in range(n_batch):
            for c in range(channels):
                for y in range(ho):
                    for xx in range(wo):
                        a = idx[n, c, y, xx]
                        out[n, c, 2 * y + a // 2, 2 * xx + a % 2] = grad[n, c, y, xx]
    return out_arr
