# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im; same layout and summation order as ``_pykernels``."""

import numpy as np

BACKEND = "cython"


def out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(const double[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    cdef Py_ssize_t K = c * kh * kw
    out = np.empty((n * ho * wo, K), dtype=np.float64)
    cdef double[:, ::1] cols = out
    cdef const double* src = &x[0, 0, 0, 0]
    cdef double* dst
    cdef const double* plane
    cdef Py_ssize_t b, oh, ow, ch, i, j, y, x0, col
    cdef bint inside
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    dst = &cols[(b * ho + oh) * wo + ow, 0]
                    x0 = ow * stride - pad
                    inside = x0 >= 0 and x0 + kw <= w
                    col = 0
                    for ch in range(c):
                        plane = src + (b * c + ch) * h * w
                        for i in range(kh):
                            y = oh * stride + i - pad
                            if y < 0 or y >= h:
                                for j in range(kw):
                                    dst[col + j] = 0.0
                            elif inside:
                                for j in range(kw):
                                    dst[col + j] = plane[y * w + x0 + j]
                            else:
                                for j in range(kw):
                                    if 0 <= x0 + j < w:
                                        dst[col + j] = plane[y * w + x0 + j]
                                    else:
                                        dst[col + j] = 0.0
                            col += kw
    return out


def col2im(const double[:, ::1] cols, tuple x_shape, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride, Py_ssize_t pad):
    # Per input element, contributions arrive in descending (ki, kj) order.
    cdef Py_ssize_t n = x_shape[0], c = x_shape[1], h = x_shape[2], w = x_shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef double[:, :, :, ::1] g = out
    cdef double* dst = &g[0, 0, 0, 0]
    cdef const double* row
    cdef double* plane
    cdef Py_ssize_t b, oh, ow, ch, i, j, y, x0, col
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    row = &cols[(b * ho + oh) * wo + ow, 0]
                    x0 = ow * stride - pad
                    col = 0
                    for ch in range(c):
                        plane = dst + (b * c + ch) * h * w
                        for i in range(kh):
                            y = oh * stride + i - pad
                            if 0 <= y < h:
                                for j in range(kw):
                                    if 0 <= x0 + j < w:
                                        plane[y * w + x0 + j] += row[col + j]
                            col += kw
    return out
