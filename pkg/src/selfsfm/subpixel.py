"""Sub-pixel convolution upsampling with ICNR initialization, the
disparity/uncertainty head, and the bounded disparity-to-depth map."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Var

MIN_DEPTH = 0.1
MAX_DEPTH = 100.0


def kaiming_uniform(shape, seed=0):
    """Uniform(-b, b) with b = sqrt(6 / fan_in), from a seeded generator."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return np.random.default_rng(seed).uniform(-bound, bound, size=shape)


def icnr_init(out_ch, in_ch, k, r, base_sampler=None, seed=0):
    """ICNR kernel: each base filter repeated over ``r*r`` consecutive output channels.

    After :func:`~selfsfm.tensor.pixel_shuffle`, a convolution with this kernel
    equals nearest-neighbour upsampling of the convolution with the base kernel.
    ``base_sampler(shape)`` defaults to seeded Kaiming-uniform.
    """
    if out_ch % (r * r):
        raise DimensionError(f"out_ch={out_ch} not divisible by r^2={r * r}")
    shape = (out_ch // (r * r), in_ch, k, k)
    if base_sampler is None:
        base = kaiming_uniform(shape, seed=seed)
    else:
        base = np.asarray(base_sampler(shape), dtype=np.float64)
    return np.repeat(base, r * r, axis=0)


def nn_upsample(x, r):
    """Nearest-neighbour upsampling of a (C, H, W) array by ``r``."""
    x = np.asarray(x.value if isinstance(x, Var) else x)
    return x.repeat(r, axis=1).repeat(r, axis=2)


def phase_variance(y, r):
    """Variance across the ``r*r`` sub-pixel phases of a (C, rH, rW) map, per low-res pixel."""
    y = np.asarray(y.value if isinstance(y, Var) else y)
    C, Hr, Wr = y.shape
    phases = y.reshape(C, Hr // r, r, Wr // r, r).transpose(0, 1, 3, 2, 4)
    return phases.reshape(C, Hr // r, Wr // r, r * r).var(axis=-1)


@dataclass
class SubpixelBlockWeights:
    """dconv(3x3, ELU) -> s1conv(5x5, ReLU) -> s2conv(3x3, ReLU) -> upconv(3x3, ReLU) -> shuffle."""

    dconv: Var
    dconv_b: Var
    s1conv: Var
    s1conv_b: Var
    s2conv: Var
    s2conv_b: Var
    upconv: Var
    upconv_b: Var
    r: int = 2

    def __post_init__(self):
        if self.upconv.shape[0] % (self.r * self.r):
            raise DimensionError("upconv output channels must be divisible by r^2")

    @classmethod
    def init(cls, in_ch, out_ch, mid=(16, 16, 8), r=2, seed=0, requires_grad=True):
        """Kaiming-uniform convs with an ICNR upconv, zero biases."""
        d, s1, s2 = mid
        shapes = [(d, in_ch, 3, 3), (s1, d, 5, 5), (s2, s1, 3, 3)]
        ks = [kaiming_uniform(s, seed=seed + i) for i, s in enumerate(shapes)]
        up = icnr_init(out_ch * r * r, s2, 3, r, seed=seed + 3)
        mk = lambda a, n: Var(a, requires_grad=requires_grad, name=n)  # noqa: E731
        return cls(mk(ks[0], "dconv"), mk(np.zeros(d), "dconv_b"),
                   mk(ks[1], "s1conv"), mk(np.zeros(s1), "s1conv_b"),
                   mk(ks[2], "s2conv"), mk(np.zeros(s2), "s2conv_b"),
                   mk(up, "upconv"), mk(np.zeros(out_ch * r * r), "upconv_b"), r)

    def params(self):
        return [self.dconv, self.dconv_b, self.s1conv, self.s1conv_b,
                self.s2conv, self.s2conv_b, self.upconv, self.upconv_b]


def subpixel_block(features, w):
    """(C, H, W) features -> (C', rH, rW); stride 1, zero padding keeps sizes."""
    x = T.elu(T.conv2d(features, w.dconv, pad=1, bias=w.dconv_b))
    x = T.relu(T.conv2d(x, w.s1conv, pad=2, bias=w.s1conv_b))
    x = T.relu(T.conv2d(x, w.s2conv, pad=1, bias=w.s2conv_b))
    x = T.relu(T.conv2d(x, w.upconv, pad=1, bias=w.upconv_b))
    return T.pixel_shuffle(x, w.r)


@dataclass
class DispUncertHeadWeights:
    kernel: Var  # (2, C, 3, 3)
    bias: Var  # (2,)

    @classmethod
    def init(cls, in_ch, seed=0, requires_grad=True):
        return cls(Var(kaiming_uniform((2, in_ch, 3, 3), seed=seed), requires_grad, "head"),
                   Var(np.zeros(2), requires_grad, "head_b"))

    def params(self):
        return [self.kernel, self.bias]


def disp_uncert_head(features, w):
    """3x3 conv to two sigmoid channels: (disparity, uncertainty), each (1, H, W)."""
    if w.kernel.shape[0] != 2:
        raise DimensionError("head kernel must produce 2 channels")
    out = T.sigmoid(T.conv2d(features, w.kernel, pad=1, bias=w.bias))
    return out[0:1], out[1:2]


def _check_bounds(min_depth, max_depth):
    if min_depth <= 0 or max_depth <= min_depth:
        raise DomainError(f"need 0 < min_depth < max_depth, got {min_depth}, {max_depth}")


def disparity_to_depth(sigma, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
    """Depth 1 / (a*sigma + b) with b = 1/max_depth, a = 1/min_depth - 1/max_depth.

    sigma = 0 gives max_depth, sigma = 1 gives min_depth. The inverse depth is
    formed as the convex combination ``sigma/min + (1-sigma)/max``, which equals
    ``a*sigma + b`` and hits both bounds exactly.
    """
    _check_bounds(min_depth, max_depth)
    sigma = T.as_var(sigma)
    inv = sigma * (1.0 / min_depth) + (1.0 - sigma) * (1.0 / max_depth)
    return 1.0 / inv


def depth_to_disparity(depth, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
    """Inverse of :func:`disparity_to_depth` (numpy)."""
    _check_bounds(min_depth, max_depth)
    depth = np.asarray(depth, dtype=np.float64)
    lo, hi = 1.0 / max_depth, 1.0 / min_depth
    return (1.0 / depth - lo) / (hi - lo)
