# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for convolution and bilinear sampling.

Every loop accumulates in a fixed row-major order so results are
bit-reproducible across runs.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def conv2d_forward(const double[:, :, ::1] x, const double[:, :, :, ::1] w, int stride, int groups):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], Cg = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t Ho = (H - k) // stride + 1
    cdef Py_ssize_t Wo = (W - k) // stride + 1
    cdef Py_ssize_t Og = O // groups
    out_arr = np.zeros((O, Ho, Wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t o, c, ci, i, j, y, xx, g
    cdef double wv
    for o in range(O):
        g = o // Og
        for ci in range(Cg):
            c = g * Cg + ci
            for i in range(k):
                for j in range(k):
                    wv = w[o, ci, i, j]
                    if wv == 0.0:
                        continue
                    for y in range(Ho):
                        for xx in range(Wo):
                            out[o, y, xx] += wv * x[c, y * stride + i, xx * stride + j]
    return out_arr


def conv2d_backward(const double[:, :, ::1] x, const double[:, :, :, ::1] w,
                    const double[:, :, ::1] gout, int stride, int groups):
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    cdef Py_ssize_t O = w.shape[0], Cg = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t Ho = gout.shape[1], Wo = gout.shape[2]
    cdef Py_ssize_t Og = O // groups
    gx_arr = np.zeros((C, H, W), dtype=np.float64)
    gw_arr = np.zeros((O, Cg, k, k), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef Py_ssize_t o, c, ci, i, j, y, xx, g
    cdef double wv, acc, go
    for o in range(O):
        g = o // Og
        for ci in range(Cg):
            c = g * Cg + ci
            for i in range(k):
                for j in range(k):
                    wv = w[o, ci, i, j]
                    acc = 0.0
                    for y in range(Ho):
                        for xx in range(Wo):
                            go = gout[o, y, xx]
                            acc += go * x[c, y * stride + i, xx * stride + j]
                            gx[c, y * stride + i, xx * stride + j] += wv * go
                    gw[o, ci, i, j] = acc
    return gx_arr, gw_arr


cdef inline void _cell(double v, Py_ssize_t n, Py_ssize_t* i0, Py_ssize_t* i1,
                       double* frac, bint* inside) noexcept nogil:
    # clamp-to-edge: coordinates outside [0, n-1] snap to the border with zero slope
    cdef double vc = v
    inside[0] = True
    if n == 1:
        i0[0] = 0
        i1[0] = 0
        frac[0] = 0.0
        inside[0] = False
        return
    if vc <= 0.0:
        vc = 0.0
        inside[0] = v > 0.0
    elif vc >= n - 1:
        vc = n - 1
        inside[0] = False
    cdef Py_ssize_t f = <Py_ssize_t>floor(vc)
    if f > n - 2:
        f = n - 2
    i0[0] = f
    i1[0] = f + 1
    frac[0] = vc - f


def bilinear_forward(const double[:, :, ::1] src, const double[:, ::1] gx, const double[:, ::1] gy):
    cdef Py_ssize_t C = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t Ho = gx.shape[0], Wo = gx.shape[1]
    out_arr = np.empty((C, Ho, Wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, y, xx, x0, x1, y0, y1
    cdef double ax, ay
    cdef bint inx, iny
    with nogil:
        for y in range(Ho):
            for xx in range(Wo):
                _cell(gx[y, xx], W, &x0, &x1, &ax, &inx)
                _cell(gy[y, xx], H, &y0, &y1, &ay, &iny)
                for c in range(C):
                    out[c, y, xx] = ((1.0 - ay) * ((1.0 - ax) * src[c, y0, x0] + ax * src[c, y0, x1])
                                     + ay * ((1.0 - ax) * src[c, y1, x0] + ax * src[c, y1, x1]))
    return out_arr


def bilinear_backward(const double[:, :, ::1] src, const double[:, ::1] gx, const double[:, ::1] gy,
                      const double[:, :, ::1] gout):
    cdef Py_ssize_t C = src.shape[0], H = src.shape[1], W = src.shape[2]
    cdef Py_ssize_t Ho = gx.shape[0], Wo = gx.shape[1]
    gsrc_arr = np.zeros((C, H, W), dtype=np.float64)
    ggx_arr = np.zeros((Ho, Wo), dtype=np.float64)
    ggy_arr = np.zeros((Ho, Wo), dtype=np.float64)
    cdef double[:, :, ::1] gsrc = gsrc_arr
    cdef double[:, ::1] ggx = ggx_arr
    cdef double[:, ::1] ggy = ggy_arr
    cdef Py_ssize_t c, y, xx, x0, x1, y0, y1
    cdef double ax, ay, g, v00, v01, v10, v11, sx, sy
    cdef bint inx, iny
    with nogil:
        for y in range(Ho):
            for xx in range(Wo):
                _cell(gx[y, xx], W, &x0, &x1, &ax, &inx)
                _cell(gy[y, xx], H, &y0, &y1, &ay, &iny)
                sx = 0.0
                sy = 0.0
                for c in range(C):
                    g = gout[c, y, xx]
                    v00 = src[c, y0, x0]
                    v01 = src[c, y0, x1]
                    v10 = src[c, y1, x0]
                    v11 = src[c, y1, x1]
                    gsrc[c, y0, x0] += g * (1.0 - ay) * (1.0 - ax)
                    gsrc[c, y0, x1] += g * (1.0 - ay) * ax
                    gsrc[c, y1, x0] += g * ay * (1.0 - ax)
                    gsrc[c, y1, x1] += g * ay * ax
                    sx += g * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10))
                    sy += g * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01))
                if inx:
                    ggx[y, xx] = sx
                if iny:
                    ggy[y, xx] = sy
    return gsrc_arr, ggx_arr, ggy_arr


cdef inline Py_ssize_t _reflect(Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    if i < 0:
        return -i
    if i >= n:
        return 2 * (n - 1) - i
    return i


def box3_reflect(const double[:, :, ::1] x):
    """Per-channel 3x3 mean with reflect padding (edge not repeated)."""
    cdef Py_ssize_t C = x.shape[0], H = x.shape[1], W = x.shape[2]
    out_arr = np.empty((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, di, dj, ii
    cdef double acc
    with nogil:
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for di in range(-1, 2):
                        ii = _reflect(i + di, H)
                        for dj in range(-1, 2):
                            acc += x[c, ii, _reflect(j + dj, W)]
                    out[c, i, j] = acc / 9.0
    return out_arr


def box3_reflect_adjoint(const double[:, :, ::1] g):
    cdef Py_ssize_t C = g.shape[0], H = g.shape[1], W = g.shape[2]
    out_arr = np.zeros((C, H, W), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t c, i, j, di, dj, ii
    cdef double v
    with nogil:
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    v = g[c, i, j] / 9.0
                    for di in range(-1, 2):
                        ii = _reflect(i + di, H)
                        for dj in range(-1, 2):
                            out[c, ii, _reflect(j + dj, W)] += v
    return out_arr
