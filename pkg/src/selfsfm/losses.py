"""Photometric, uncertainty, auto-mask and smoothness terms, and the
multi-scale training objective built from them."""

from dataclasses import dataclass, fields

import numpy as np

from . import kernels
from . import tensor as T
from .camera import synthesize_view, warp_grid
from .errors import DimensionError, DomainError
from .subpixel import disparity_to_depth
from .tensor import Var

# added to the error of pixels whose warp landed behind the camera so that
# the per-pixel minimum never selects them
INVALID_PENALTY = 1e3


@dataclass
class LossConfig:
    alpha: float = 0.85
    smooth_weight: float = 1e-3
    smooth_scale_decay: bool = True
    ssim_c1: float = 0.01 ** 2
    ssim_c2: float = 0.03 ** 2
    sigma_min: float = 0.01
    uncert_offset: float = 1.5
    n_scales: int = 4
    min_depth: float = 0.1
    max_depth: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.sigma_min < 1.0:
            raise ValueError("sigma_min must lie in (0, 1)")
        if self.n_scales < 1:
            raise ValueError("n_scales must be >= 1")

    @property
    def scale_factors(self):
        """Resolution factors, coarsest first (1/8, 1/4, 1/2, 1 for four scales)."""
        return [1.0 / 2 ** s for s in reversed(range(self.n_scales))]

    def smooth_weight_at(self, s):
        return self.smooth_weight / 2 ** s if self.smooth_scale_decay else self.smooth_weight

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def _check_same(x, y):
    if x.shape != y.shape:
        raise DimensionError(f"shape mismatch {x.shape} vs {y.shape}")


# ------------------------------------------------------------------------ SSIM

def box3(x, pad_mode="reflect"):
    """Per-channel 3x3 mean of a (C, H, W) Var."""
    C = x.shape[0]
    kernel = np.full((C, 1, 3, 3), 1.0 / 9.0)
    return T.conv2d(x, Var(kernel), pad=1, pad_mode=pad_mode, groups=C)


def ssim(x, y, cfg=None):
    """Per-pixel SSIM map of two (C, H, W) images using 3x3 reflect-padded windows."""
    cfg = cfg or LossConfig()
    x, y = T.as_var(x), T.as_var(y)
    _check_same(x, y)
    C = x.shape[0]
    stats = box3(T.concat([x, y, x * x, y * y, x * y], axis=0))
    mx, my = stats[0:C], stats[C:2 * C]
    sxx = stats[2 * C:3 * C] - mx * mx
    syy = stats[3 * C:4 * C] - my * my
    sxy = stats[4 * C:5 * C] - mx * my
    c1, c2 = cfg.ssim_c1, cfg.ssim_c2
    num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def _photometric_fused(target, image, cfg):
    """Single tape node for a constant target; same values as the composed version."""
    x, y = target.value, image.value
    C = x.shape[0]
    c1, c2, alpha = cfg.ssim_c1, cfg.ssim_c2, cfg.alpha
    box = kernels.box3_reflect
    mx, my = box(x), box(y)
    sxx = box(x * x) - mx * mx
    syy = box(y * y) - my * my
    sxy = box(x * y) - mx * my
    n1, n2 = 2.0 * mx * my + c1, 2.0 * sxy + c2
    d1, d2 = mx * mx + my * my + c1, sxx + syy + c2
    S = (n1 * n2) / (d1 * d2)
    diff = x - y
    sgn = T.decision(np.sign(diff))
    out = (alpha * 0.5 * (1.0 - S) + (1.0 - alpha) * sgn * diff).mean(axis=0, keepdims=True)

    def vjp(g):
        G = np.broadcast_to(g / C, x.shape)
        gS = -0.5 * alpha * G * S
        g_my = gS * (2.0 * mx / n1 - 2.0 * mx / n2 - 2.0 * my / d1 + 2.0 * my / d2)
        g_eyy = -gS / d2
        g_exy = gS * 2.0 / n2
        box_t = kernels.box3_reflect_adjoint
        gy = box_t(g_my) + 2.0 * y * box_t(g_eyy) + x * box_t(g_exy)
        gy -= (1.0 - alpha) * G * sgn
        return (None, gy)

    return Var._node(out, (target, image), vjp)


def photometric_error(target, image, cfg=None):
    """alpha * (1 - SSIM) / 2 + (1 - alpha) * |target - image|, averaged over channels -> (1, H, W)."""
    cfg = cfg or LossConfig()
    target, image = T.as_var(target), T.as_var(image)
    _check_same(target, image)
    if (not target.requires_grad and cfg.alpha != 0.0 and target.ndim == 3
            and min(target.shape[1:]) >= 2):
        return _photometric_fused(target, image, cfg)
    l1 = T.abs(target - image)
    if cfg.alpha == 0.0:
        per_channel = l1
    else:
        per_channel = cfg.alpha * 0.5 * (1.0 - ssim(target, image, cfg)) + (1.0 - cfg.alpha) * l1
    return T.mean(per_channel, axis=0, keepdims=True)


def min_reprojection(err_maps):
    """Per-pixel minimum over a list of error maps."""
    if not err_maps:
        raise DomainError("min_reprojection needs at least one map")
    if len(err_maps) == 1:
        return T.as_var(err_maps[0])
    return T.min_axis(T.stack(err_maps), axis=0)


def uncertainty_weighted(min_err, sigma, cfg=None):
    """min_err / (2 Sigma^2) + 0.5 log Sigma + offset with Sigma clamped to [sigma_min, 1].

    ``sigma=None`` means Sigma = 1 everywhere.
    """
    cfg = cfg or LossConfig()
    min_err = T.as_var(min_err)
    if sigma is None:
        return min_err / 2.0 + cfg.uncert_offset
    s = T.clamp(T.as_var(sigma), cfg.sigma_min, 1.0)
    _check_same(min_err, s)
    return min_err / (2.0 * s * s) + 0.5 * T.log(s) + cfg.uncert_offset


def auto_mask_from_errors(identity_errors, warped_errors):
    """Binary (1, H, W) mask: 1 where the best unwarped error exceeds the best warped error."""
    if not identity_errors or not warped_errors:
        raise DomainError("auto_mask needs non-empty error lists")
    if len(identity_errors) != len(warped_errors):
        raise DimensionError("source and warped lists differ in length")
    ident = np.min(np.stack([T.as_var(e).value for e in identity_errors]), axis=0)
    warped = np.min(np.stack([T.as_var(e).value for e in warped_errors]), axis=0)
    return Var((ident > warped).astype(np.float64))


def auto_mask(target, sources, warped, cfg=None):
    """Static-pixel mask; carries no gradient."""
    if not sources or not warped:
        raise DomainError("auto_mask needs non-empty image lists")
    if len(sources) != len(warped):
        raise DimensionError("source and warped lists differ in length")
    cfg = cfg or LossConfig()
    target = const_image(target)
    ident = [photometric_error(target, const_image(s), cfg) for s in sources]
    warp = [photometric_error(target, const_image(w), cfg) for w in warped]
    return auto_mask_from_errors(ident, warp)


def const_image(x):
    return T.const(x)


# ------------------------------------------------------------------ smoothness

def _dx(a):
    return a[:, :, 1:] - a[:, :, :-1]


def _dy(a):
    return a[:, 1:, :] - a[:, :-1, :]


def _grad_terms(a):
    """First-order (dx + dy) and second-order (dxx + dxy + dyx + dyy) forward differences.

    Works on Vars and numpy arrays alike; regions shrink to the pixels where
    every stencil in the sum is defined.
    """
    H, W = a.shape[1], a.shape[2]
    dx, dy = _dx(a), _dy(a)
    g1 = None
    if H >= 2 and W >= 2:
        g1 = dx[:, :H - 1, :] + dy[:, :, :W - 1]
    g2 = None
    if H >= 3 and W >= 3:
        dxx = _dx(dx)[:, :H - 2, :]
        dxy = _dy(dx)[:, :H - 2, :W - 2]
        dyx = _dx(dy)[:, :H - 2, :W - 2]
        dyy = _dy(dy)[:, :, :W - 2]
        g2 = dxx + dxy + dyx + dyy
    return g1, g2


def smoothness(disp, image, cfg=None):
    """Edge-aware first + second order smoothness of mean-normalized disparity."""
    disp = T.as_var(disp)
    image = np.asarray(image.value if isinstance(image, Var) else image, dtype=np.float64)
    if disp.shape[1:] != image.shape[1:]:
        raise DimensionError(f"disparity {disp.shape} and image {image.shape} differ in size")
    m = T.mean(disp)
    if m.item() == 0.0:
        raise DomainError("mean disparity is zero")
    d = disp / m
    d1, d2 = _grad_terms(d)
    i1, i2 = _grad_terms(image)
    total = Var(0.0)
    if d1 is not None:
        w1 = np.exp(-0.5 * np.mean(np.abs(i1), axis=0, keepdims=True))
        total = total + T.mean(T.abs(d1) * w1)
    if d2 is not None:
        w2 = np.exp(-0.5 * np.mean(np.abs(i2), axis=0, keepdims=True))
        total = total + T.mean(T.abs(d2) * w2)
    return total


# ------------------------------------------------------------------- resizing

def upsample_bilinear(x, H, W):
    """Bilinear resize of a (C, h, w) Var to (C, H, W) with pixel-centre alignment."""
    x = T.as_var(x)
    h, w = x.shape[1], x.shape[2]
    if (h, w) == (H, W):
        return x
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    grid = np.stack([(xs + 0.5) * w / W - 0.5, (ys + 0.5) * h / H - 0.5])
    return T.bilinear_sample(x, Var(grid))


def resize_image(img, h, w):
    """Downsize a (C, H, W) array: block mean when sizes divide, bilinear otherwise."""
    img = np.asarray(img.value if isinstance(img, Var) else img, dtype=np.float64)
    C, H, W = img.shape
    if (H, W) == (h, w):
        return img
    if H % h == 0 and W % w == 0:
        return img.reshape(C, h, H // h, w, W // w).mean(axis=(2, 4))
    return upsample_bilinear(Var(img), h, w).value


def scale_shape(H, W, s):
    return max(1, H // 2 ** s), max(1, W // 2 ** s)


# ------------------------------------------------------------------ objective

def identity_errors(target, sources, cfg=None):
    """Unwarped photometric errors (constants), one per source."""
    return [photometric_error(T.const(target), T.const(s), cfg).value for s in sources]


def total_loss(target, sources, disparities, intr, poses, cfg=None, uncertainties=None,
               ident_errors=None, stats=None):
    """Scale-averaged mu * L_p* + lambda_s * L_s.

    Args:
        target: (C, H, W) target frame.
        sources: list of (C, H, W) source frames.
        disparities: per-scale sigmoid disparity Vars, index 0 = full resolution.
        intr: :class:`~selfsfm.camera.Intrinsics`.
        poses: target-to-source :class:`~selfsfm.camera.PoseSE3`, one per source.
        uncertainties: optional per-scale Sigma Vars (same sizes as disparities).
        ident_errors: cached result of :func:`identity_errors`.
        stats: optional dict that receives per-scale diagnostics.
    """
    cfg = cfg or LossConfig()
    target_v = T.const(target)
    C, H, W = target_v.shape
    if len(sources) != len(poses):
        raise DimensionError("need one pose per source frame")
    if len(disparities) != cfg.n_scales:
        raise DimensionError(f"expected {cfg.n_scales} disparity scales, got {len(disparities)}")
    if ident_errors is None:
        ident_errors = identity_errors(target, sources, cfg)
    sources_v = [T.const(s) for s in sources]
    per_scale = []
    if stats is not None:
        stats.setdefault("mask_fraction", [])
        stats.setdefault("photometric", [])
        stats.setdefault("smoothness", [])
    for s in range(cfg.n_scales):
        disp_s = T.as_var(disparities[s])
        if disp_s.shape[1:] != scale_shape(H, W, s):
            raise DimensionError(f"scale {s} disparity has shape {disp_s.shape}")
        depth = disparity_to_depth(upsample_bilinear(disp_s, H, W), cfg.min_depth, cfg.max_depth)
        errs, any_valid = [], np.zeros((H, W), dtype=bool)
        for src, pose in zip(sources_v, poses):
            grid, valid = warp_grid(depth, intr, pose, W, H)
            valid = T.decision(valid)
            err = photometric_error(target_v, synthesize_view(src, grid), cfg)
            if not valid.all():
                err = err + Var(np.where(valid, 0.0, INVALID_PENALTY)[None])
            errs.append(err)
            any_valid |= valid
        min_err = min_reprojection(errs)
        mu = T.decision(auto_mask_from_errors(ident_errors, errs).value[0].astype(bool) & any_valid)
        sigma = None
        if uncertainties is not None:
            sigma = upsample_bilinear(uncertainties[s], H, W)
        lp = uncertainty_weighted(min_err, sigma, cfg)
        weights = mu if mu.any() else any_valid
        if not weights.any():
            weights = np.ones((H, W), dtype=bool)
        photo = T.sum(lp * Var(weights[None].astype(np.float64))) / float(weights.sum())
        scale_total = photo
        lam = cfg.smooth_weight_at(s)
        smooth = None
        if lam != 0.0:
            h, w = disp_s.shape[1:]
            smooth = smoothness(disp_s, resize_image(target_v.value, h, w), cfg)
            scale_total = scale_total + lam * smooth
        per_scale.append(scale_total)
        if stats is not None:
            stats["mask_fraction"].append(float(mu.mean()))
            stats["photometric"].append(photo.item())
            stats["smoothness"].append(0.0 if smooth is None else smooth.item())
    return T.sum(T.stack(per_scale)) / float(cfg.n_scales)
