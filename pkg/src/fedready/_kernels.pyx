# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution and pooling kernels (see _kernels_py for the contract)."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


cdef inline Py_ssize_t _lo(Py_ssize_t p, Py_ssize_t t) noexcept nogil:
    # first output index whose tap t lands inside the input
    return p - t if t < p else 0


cdef inline Py_ssize_t _hi(Py_ssize_t n, Py_ssize_t p, Py_ssize_t t) noexcept nogil:
    # one past the last output index whose tap t lands inside the input
    return n + p - t if t > p else n


cdef void _im2col(double[:, :, :, ::1] x, Py_ssize_t k, double[:, :, ::1] cols) noexcept nogil:
    # cols[n, (c, i, j), (y, x)] = x[n, c, y + i - p, x + j - p], zero outside
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3], p = k // 2
    cdef Py_ssize_t ni, ci, i, j, yi, xi, r, y0, y1, x0, x1
    for ni in range(n):
        r = 0
        for ci in range(c):
            for i in range(k):
                y0 = _lo(p, i)
                y1 = _hi(h, p, i)
                for j in range(k):
                    x0 = _lo(p, j)
                    x1 = _hi(wd, p, j)
                    for yi in range(y0, y1):
                        for xi in range(x0, x1):
                            cols[ni, r, yi * wd + xi] = x[ni, ci, yi + i - p, xi + j - p]
                    r += 1


cdef void _col2im(double[:, :, ::1] cols, Py_ssize_t k, double[:, :, :, ::1] dx) noexcept nogil:
    # adjoint of _im2col: scatter-add each column entry back to its input pixel
    cdef Py_ssize_t n = dx.shape[0], c = dx.shape[1], h = dx.shape[2], wd = dx.shape[3], p = k // 2
    cdef Py_ssize_t ni, ci, i, j, yi, xi, r, y0, y1, x0, x1
    for ni in range(n):
        r = 0
        for ci in range(c):
            for i in range(k):
                y0 = _lo(p, i)
                y1 = _hi(h, p, i)
                for j in range(k):
                    x0 = _lo(p, j)
                    x1 = _hi(wd, p, j)
                    for yi in range(y0, y1):
                        for xi in range(x0, x1):
                            dx[ni, ci, yi + i - p, xi + j - p] += cols[ni, r, yi * wd + xi]
                    r += 1


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, double[::1] b):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = w.shape[0], k = w.shape[2]
    cols_arr = np.zeros((n, c * k * k, h * wd))
    cdef double[:, :, ::1] cols = cols_arr
    with nogil:
        _im2col(x, k, cols)
    out = np.matmul(np.asarray(w).reshape(f, -1), cols_arr)
    out += np.asarray(b)[None, :, None]
    return out.reshape(n, f, h, wd)


def conv2d_grad_input(double[:, :, :, ::1] dout, double[:, :, :, ::1] w):
    cdef Py_ssize_t n = dout.shape[0], f = dout.shape[1], h = dout.shape[2], wd = dout.shape[3]
    cdef Py_ssize_t c = w.shape[1], k = w.shape[2]
    cols_arr = np.ascontiguousarray(
        np.matmul(np.asarray(w).reshape(f, -1).T, np.asarray(dout).reshape(n, f, h * wd))
    )
    cdef double[:, :, ::1] cols = cols_arr
    dx_arr = np.zeros((n, c, h, wd))
    cdef double[:, :, :, ::1] dx = dx_arr
    with nogil:
        _col2im(cols, k, dx)
    return dx_arr


def conv2d_grad_weight(double[:, :, :, ::1] x, double[:, :, :, ::1] dout, Py_ssize_t k):
    """Per-sample weight gradients, shape (N, F, C, k, k)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], wd = x.shape[3]
    cdef Py_ssize_t f = dout.shape[1], p = k // 2
    dw_arr = np.zeros((n, f, c, k, k))
    cdef double[:, :, :, :, ::1] dw = dw_arr
    cdef Py_ssize_t ni, fi, ci, yi, xi, i, j, y0, y1, x0, x1, sh
    cdef double acc
    with nogil:
        for ni in range(n):
            for fi in range(f):
                for ci in range(c):
                    for i in range(k):
                        y0 = _lo(p, i)
                        y1 = _hi(h, p, i)
                        for j in range(k):
                            x0 = _lo(p, j)
                            x1 = _hi(wd, p, j)
                            sh = j - p
                            acc = 0.0
                            for yi in range(y0, y1):
                                for xi in range(x0, x1):
                                    acc = acc + dout[ni, fi, yi, xi] * x[ni, ci, yi + i - p, xi + sh]
                            dw[ni, fi, ci, i, j] = acc
    return dw_arr


def maxpool2_forward(double[:, :, :, ::1] x):
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], ho = x.shape[2] // 2, wo = x.shape[3] // 2
    out_arr = np.empty((n, c, ho, wo))
    idx_arr = np.empty((n, c, ho, wo), dtype=np.int8)
    cdef double[:, :, :, ::1] out = out_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    cdef Py_ssize_t ni, ci, yi, xi, q
    cdef double best, v
    cdef cnp.int8_t bi
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yi in range(ho):
                    for xi in range(wo):
                        best = x[ni, ci, 2 * yi, 2 * xi]
                        bi = 0
                        for q in range(1, 4):
                            v = x[ni, ci, 2 * yi + q // 2, 2 * xi + q % 2]
                            if v > best:
                                best = v
                                bi = <cnp.int8_t>q
                        out[ni, ci, yi, xi] = best
                        idx[ni, ci, yi, xi] = bi
    return out_arr, idx_arr


def maxpool2_backward(double[:, :, :, ::1] dout, cnp.int8_t[:, :, :, ::1] idx, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = dout.shape[0], c = dout.shape[1], ho = dout.shape[2], wo = dout.shape[3]
    dx_arr = np.zeros((n, c, h, w))
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef Py_ssize_t ni, ci, yi, xi, q
    with nogil:
        for ni in range(n):
            for ci in range(c):
                for yi in range(ho):
                    for xi in range(wo):
                        q = idx[ni, ci, yi, xi]
                        dx[ni, ci, 2 * yi + q // 2, 2 * xi + q % 2] = dout[ni, ci, yi, xi]
    return dx_arr
