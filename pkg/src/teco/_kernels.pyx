# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im kernels for 3-D convolution (float32 and float64)."""

import numpy as np

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, :, ::1] x, real[:, :, ::1] out,
            int kt, int kh, int kw, int st, int sh, int sw,
            int to, int ho, int wo):
    cdef Py_ssize_t n, c, a, b, d, t, h, w, row, col
    cdef Py_ssize_t nb = x.shape[0], nc = x.shape[1]
    with nogil:
        for n in range(nb):
            for c in range(nc):
                for a in range(kt):
                    for b in range(kh):
                        for d in range(kw):
                            row = ((c * kt + a) * kh + b) * kw + d
                            col = 0
                            for t in range(to):
                                for h in range(ho):
                                    for w in range(wo):
                                        out[n, row, col] = x[n, c, t * st + a, h * sh + b, w * sw + d]
                                        col += 1


def _col2im(real[:, :, ::1] cols, real[:, :, :, :, ::1] dx,
            int kt, int kh, int kw, int st, int sh, int sw,
            int to, int ho, int wo):
    cdef Py_ssize_t n, c, a, b, d, t, h, w, row, col
    cdef Py_ssize_t nb = dx.shape[0], nc = dx.shape[1]
    with nogil:
        for n in range(nb):
            for c in range(nc):
                for a in range(kt):
                    for b in range(kh):
                        for d in range(kw):
                            row = ((c * kt + a) * kh + b) * kw + d
                            col = 0
                            for t in range(to):
                                for h in range(ho):
                                    for w in range(wo):
                                        dx[n, c, t * st + a, h * sh + b, w * sw + d] += cols[n, row, col]
                                        col += 1


def im2col3d(xpad, kernel, stride, out_size):
    xpad = np.ascontiguousarray(xpad)
    n, c = xpad.shape[:2]
    kt, kh, kw = kernel
    to, ho, wo = out_size
    out = np.empty((n, c * kt * kh * kw, to * ho * wo), dtype=xpad.dtype)
    _im2col(xpad, out, kt, kh, kw, stride[0], stride[1], stride[2], to, ho, wo)
    return out


def col2im3d(cols, xpad_shape, kernel, stride, out_size):
    cols = np.ascontiguousarray(cols)
    dx = np.zeros(xpad_shape, dtype=cols.dtype)
    kt, kh, kw = kernel
    to, ho, wo = out_size
    _col2im(cols, dx, kt, kh, kw, stride[0], stride[1], stride[2], to, ho, wo)
    return dx
