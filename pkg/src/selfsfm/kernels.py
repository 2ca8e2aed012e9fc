"""Backend selection for the hot loops (convolution, bilinear sampling, box filter).

The compiled Cython extension is used when it imports; otherwise the numpy
fallback is used. ``use_backend`` switches explicitly, which the benchmark
and the backend-equivalence tests rely on.
"""

import logging

import numpy as np

from . import _pykernels

logger = logging.getLogger(__name__)

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None
    logger.debug("compiled kernels unavailable, using numpy fallback")

_BACKENDS = {"python": _pykernels}
if _ckernels is not None:
    _BACKENDS["compiled"] = _ckernels

_active = _BACKENDS.get("compiled", _pykernels)


def available_backends():
    return sorted(_BACKENDS)


def backend_name():
    return "compiled" if _active is _ckernels and _ckernels is not None else "python"


def use_backend(name):
    """Select ``"compiled"`` or ``"python"``; returns the previous name."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} not available (have {available_backends()})")
    prev = backend_name()
    _active = _BACKENDS[name]
    return prev


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, stride=1, groups=1):
    return _active.conv2d_forward(_c(x), _c(w), int(stride), int(groups))


def conv2d_backward(x, w, gout, stride=1, groups=1):
    return _active.conv2d_backward(_c(x), _c(w), _c(gout), int(stride), int(groups))


def bilinear_forward(src, gx, gy):
    return _active.bilinear_forward(_c(src), _c(gx), _c(gy))


def bilinear_backward(src, gx, gy, gout):
    return _active.bilinear_backward(_c(src), _c(gx), _c(gy), _c(gout))


def box3_reflect(x):
    """3x3 per-channel mean of (C, H, W) with reflect padding; H, W >= 2."""
    return _active.box3_reflect(_c(x))


def box3_reflect_adjoint(g):
    return _active.box3_reflect_adjoint(_c(g))
