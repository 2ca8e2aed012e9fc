"""Pure numpy versions of the compiled kernels in ``_ckernels.pyx``.

Same signatures and semantics; used when the extension is not built.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _windows(x, k, stride):
    win = sliding_window_view(x, (k, k), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d_forward(x, w, stride, groups):
    O, Cg, k, _ = w.shape
    C = x.shape[0]
    win = _windows(x, k, stride)  # (C, Ho, Wo, k, k)
    Og = O // groups
    outs = []
    for g in range(groups):
        xs = win[g * Cg:(g + 1) * Cg]
        ws = w[g * Og:(g + 1) * Og]
        outs.append(np.einsum("ocij,chwij->ohw", ws, xs, optimize=True))
    assert C == Cg * groups
    return np.ascontiguousarray(np.concatenate(outs, axis=0))


def conv2d_backward(x, w, gout, stride, groups):
    O, Cg, k, _ = w.shape
    C, H, W = x.shape
    Ho, Wo = gout.shape[1:]
    Og = O // groups
    win = _windows(x, k, stride)
    gx = np.zeros_like(x)
    gw = np.empty_like(w)
    for g in range(groups):
        xs = win[g * Cg:(g + 1) * Cg]
        ws = w[g * Og:(g + 1) * Og]
        go = gout[g * Og:(g + 1) * Og]
        gw[g * Og:(g + 1) * Og] = np.einsum("ohw,chwij->ocij", go, xs, optimize=True)
        for i in range(k):
            for j in range(k):
                gx[g * Cg:(g + 1) * Cg, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += (
                    np.tensordot(ws[:, :, i, j], go, axes=(0, 0)))
    return gx, gw


def cells(v, n):
    """Lower/upper cell index, fraction and inside flag per coordinate (clamp-to-edge)."""
    if n == 1:
        zeros = np.zeros(v.shape, dtype=np.intp)
        return zeros, zeros, np.zeros_like(v), np.zeros(v.shape, dtype=bool)
    vc = np.clip(v, 0.0, n - 1)
    inside = (v > 0.0) & (v < n - 1)
    i0 = np.minimum(np.floor(vc).astype(np.intp), n - 2)
    return i0, i0 + 1, vc - i0, inside


def refit_cells(c, v):
    """Keep the cell choice of ``c`` but take the fraction from new coordinates ``v``."""
    i0, i1, frac, inside = c
    return i0, i1, np.where(inside, v - i0, frac), inside


def bilinear_forward_cells(src, xc, yc):
    x0, x1, ax, _ = xc
    y0, y1, ay, _ = yc
    v00 = src[:, y0, x0]
    v01 = src[:, y0, x1]
    v10 = src[:, y1, x0]
    v11 = src[:, y1, x1]
    return (1.0 - ay) * ((1.0 - ax) * v00 + ax * v01) + ay * ((1.0 - ax) * v10 + ax * v11)


def bilinear_backward_cells(src, xc, yc, gout):
    x0, x1, ax, inx = xc
    y0, y1, ay, iny = yc
    C, H, W = src.shape
    v00 = src[:, y0, x0]
    v01 = src[:, y0, x1]
    v10 = src[:, y1, x0]
    v11 = src[:, y1, x1]
    gsrc = np.empty_like(src)
    corners = (
        (y0, x0, (1.0 - ay) * (1.0 - ax)),
        (y0, x1, (1.0 - ay) * ax),
        (y1, x0, ay * (1.0 - ax)),
        (y1, x1, ay * ax),
    )
    for c in range(C):
        acc = np.zeros(H * W)
        for yi, xi, wgt in corners:
            acc += np.bincount((yi * W + xi).ravel(), weights=(gout[c] * wgt).ravel(), minlength=H * W)
        gsrc[c] = acc.reshape(H, W)
    ggx = np.sum(gout * ((1.0 - ay) * (v01 - v00) + ay * (v11 - v10)), axis=0)
    ggy = np.sum(gout * ((1.0 - ax) * (v10 - v00) + ax * (v11 - v01)), axis=0)
    return gsrc, np.where(inx, ggx, 0.0), np.where(iny, ggy, 0.0)


def bilinear_forward(src, gx, gy):
    _, H, W = src.shape
    return bilinear_forward_cells(src, cells(gx, W), cells(gy, H))


def bilinear_backward(src, gx, gy, gout):
    _, H, W = src.shape
    return bilinear_backward_cells(src, cells(gx, W), cells(gy, H), gout)


def _box1(a, axis):
    n = a.shape[axis]
    p = np.pad(a, [(1, 1) if ax == axis else (0, 0) for ax in range(a.ndim)], mode="reflect")
    return (np.take(p, range(0, n), axis=axis) + np.take(p, range(1, n + 1), axis=axis)
            + np.take(p, range(2, n + 2), axis=axis)) / 3.0


def _box1_adjoint(g, axis):
    n = g.shape[axis]
    g = np.moveaxis(g, axis, -1)
    gp = np.zeros(g.shape[:-1] + (n + 2,))
    gp[..., 0:n] += g
    gp[..., 1:n + 1] += g
    gp[..., 2:n + 2] += g
    out = gp[..., 1:n + 1].copy()
    out[..., 1] += gp[..., 0]
    out[..., n - 2] += gp[..., n + 1]
    return np.moveaxis(out / 3.0, -1, axis)


def box3_reflect(x):
    return _box1(_box1(x, 1), 2)


def box3_reflect_adjoint(g):
    return _box1_adjoint(_box1_adjoint(g, 2), 1)
