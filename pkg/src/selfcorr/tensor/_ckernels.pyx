# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled im2col / col2im for NCHW cross-correlation.

The column matrix is ``(C*kh*kw) x (N*Ho*Wo)``: rows ordered (channel, ky,
kx), columns ordered (n, out_y, out_x), so the innermost loop walks along
an image row on both sides. Matches ``_kernels_py`` exactly.
"""
import numpy as np

ctypedef fused real:
    float
    double


def im2col(const real[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    if real is float:
        out = np.empty((C * kh * kw, N * Ho * Wo), dtype=np.float32)
    else:
        out = np.empty((C * kh * kw, N * Ho * Wo), dtype=np.float64)
    cdef real[:, ::1] cols = out
    cdef Py_ssize_t n, oy, ox, c, i, j, iy, ix, row, col
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for n in range(N):
                        for oy in range(Ho):
                            iy = oy * stride - pad + i
                            col = (n * Ho + oy) * Wo
                            if iy < 0 or iy >= H:
                                for ox in range(Wo):
                                    cols[row, col + ox] = 0
                                continue
                            for ox in range(Wo):
                                ix = ox * stride - pad + j
                                if ix < 0 or ix >= W:
                                    cols[row, col + ox] = 0
                                else:
                                    cols[row, col + ox] = x[n, c, iy, ix]
    return out


def col2im(const real[:, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H,
           Py_ssize_t W, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t Ho = (H + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t Wo = (W + 2 * pad - kw) // stride + 1
    if real is float:
        out = np.zeros((N, C, H, W), dtype=np.float32)
    else:
        out = np.zeros((N, C, H, W), dtype=np.float64)
    cdef real[:, :, :, ::1] dx = out
    cdef Py_ssize_t n, oy, ox, c, i, j, iy, ix, row, col
    with nogil:
        for c in range(C):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for n in range(N):
                        for oy in range(Ho):
                            iy = oy * stride - pad + i
                            if iy < 0 or iy >= H:
                                continue
                            col = (n * Ho + oy) * Wo
                            for ox in range(Wo):
                                ix = ox * stride - pad + j
                                if ix >= 0 and ix < W:
                                    dx[n, c, iy, ix] += cols[row, col + ox]
    return out
