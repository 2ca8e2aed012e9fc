"""Pinhole intrinsics, SE(3) poses and the differentiable warp field.

Intrinsics are stored normalized by image width/height. Focal lengths pass
through softplus so they stay positive; principal offsets are free.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, DomainError
from .tensor import Var

SMALL_ANGLE = 1e-4
MIN_PROJECTED_DEPTH = 1e-6


def softplus_inverse(y):
    """Inverse of ``log(1 + exp(x))`` for ``y > 0``."""
    y = np.asarray(y, dtype=np.float64)
    return np.log(np.expm1(y))


@dataclass
class Intrinsics:
    """Normalized pinhole parameters; ``fx = softplus(raw_fx)``."""

    raw_fx: Var
    raw_fy: Var
    cx: Var
    cy: Var

    @classmethod
    def from_normalized(cls, fx, fy, cx, cy, requires_grad=False):
        if fx <= 0 or fy <= 0:
            raise ValueError("focal lengths must be positive")
        mk = (lambda v, n: Var(v, requires_grad=True, name=n)) if requires_grad else (
            lambda v, n: Var(v, name=n))
        return cls(mk(softplus_inverse(fx), "raw_fx"), mk(softplus_inverse(fy), "raw_fy"),
                   mk(cx, "cx"), mk(cy, "cy"))

    @property
    def fx(self):
        return T.softplus(self.raw_fx)

    @property
    def fy(self):
        return T.softplus(self.raw_fy)

    def normalized(self):
        """(fx, fy, cx, cy) as floats."""
        return (self.fx.item(), self.fy.item(), self.cx.item(), self.cy.item())

    def params(self):
        return [self.raw_fx, self.raw_fy, self.cx, self.cy]

    def pixel_params(self, W, H):
        """Pixel-unit (fx, fy, cx, cy) as differentiable scalars."""
        return self.fx * float(W), self.fy * float(H), self.cx * float(W), self.cy * float(H)

    def matrix_np(self, W, H):
        fx, fy, cx, cy = self.normalized()
        return np.array([[fx * W, 0.0, cx * W], [0.0, fy * H, cy * H], [0.0, 0.0, 1.0]])


def init_intrinsics(W, H, requires_grad=True):
    """Focal lengths at W/2, H/2 pixels and the principal point at the image centre.

    In normalized units all four parameters are 0.5.
    """
    if W <= 0 or H <= 0:
        raise ValueError("image size must be positive")
    return Intrinsics.from_normalized(0.5, 0.5, 0.5, 0.5, requires_grad=requires_grad)


def intrinsics_matrix(intr, W, H):
    """Pixel-unit 3x3 K as a Var, differentiable w.r.t. the raw parameters."""
    if W <= 0 or H <= 0:
        raise ValueError("image size must be positive")
    fx, fy, cx, cy = intr.pixel_params(W, H)
    zero, one = Var(0.0), Var(1.0)
    return T.reshape(T.stack([fx, zero, cx, zero, fy, cy, zero, zero, one]), (3, 3))


# ------------------------------------------------------------------- rotations

def _skew_np(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def so3_exp_np(omega):
    omega = np.asarray(omega, dtype=np.float64)
    th2 = float(omega @ omega)
    if th2 < SMALL_ANGLE ** 2:
        a, b = 1.0 - th2 / 6.0, 0.5 - th2 / 24.0
    else:
        th = np.sqrt(th2)
        a, b = np.sin(th) / th, (1.0 - np.cos(th)) / th2
    K = _skew_np(omega)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log_np(R):
    R = np.asarray(R, dtype=np.float64)
    cos_th = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    th = np.arccos(cos_th)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if th < SMALL_ANGLE:
        return 0.5 * v * (1.0 + th * th / 6.0)
    if np.pi - th < 1e-6:
        # near pi: axis from the symmetric part
        M = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(M), 0.0, None))
        i = int(np.argmax(axis))
        axis = M[i] / axis[i]
        return th * axis / np.linalg.norm(axis)
    return th / (2.0 * np.sin(th)) * v


def so3_exp(omega):
    """Rodrigues map from an axis-angle 3-vector Var to a 3x3 rotation Var."""
    omega = T.as_var(omega)
    w = [omega[i] for i in range(3)]
    th2 = T.sum(omega * omega)
    if th2.item() < SMALL_ANGLE ** 2:
        a = 1.0 - th2 * (1.0 / 6.0)
        b = 0.5 - th2 * (1.0 / 24.0)
    else:
        th = T.sqrt(th2)
        a = T.sin(th) / th
        b = (1.0 - T.cos(th)) / th2
    zero = Var(0.0)
    K = [[zero, -w[2], w[1]], [w[2], zero, -w[0]], [-w[1], w[0], zero]]
    entries = []
    for i in range(3):
        for j in range(3):
            # (K^2)_ij = w_i w_j - |w|^2 delta_ij
            k2 = w[i] * w[j] - th2 if i == j else w[i] * w[j]
            entries.append(1.0 + b * k2 if i == j else a * K[i][j] + b * k2)
    return T.reshape(T.stack(entries), (3, 3))


@dataclass
class PoseSE3:
    """Rigid transform x -> R x + t with R = exp([omega]x)."""

    omega: Var
    t: Var

    @classmethod
    def identity(cls, requires_grad=False):
        return cls(Var(np.zeros(3), requires_grad=requires_grad, name="omega"),
                   Var(np.zeros(3), requires_grad=requires_grad, name="t"))

    @classmethod
    def from_arrays(cls, omega, t, requires_grad=False):
        return cls(Var(omega, requires_grad=requires_grad, name="omega"),
                   Var(t, requires_grad=requires_grad, name="t"))

    @classmethod
    def from_matrix(cls, M, requires_grad=False):
        M = np.asarray(M, dtype=np.float64)
        return cls.from_arrays(so3_log_np(M[:3, :3]), M[:3, 3], requires_grad)

    def rotation(self):
        return so3_exp(self.omega)

    def rotation_np(self):
        return so3_exp_np(self.omega.value)

    def matrix(self):
        """4x4 homogeneous matrix (numpy)."""
        M = np.eye(4)
        M[:3, :3] = self.rotation_np()
        M[:3, 3] = self.t.value
        return M

    def inverse(self):
        R = self.rotation_np()
        return PoseSE3.from_arrays(-self.omega.value, -R.T @ self.t.value)

    def compose(self, other):
        """``self * other``: apply ``other`` first."""
        return PoseSE3.from_matrix(self.matrix() @ other.matrix())

    def params(self):
        return [self.omega, self.t]


# ------------------------------------------------------------------------ warp

def warp_grid(depth, intr, pose, W, H):
    """Source-frame pixel coordinates of every target pixel.

    Back-projects each target pixel with K^-1 and its depth, applies the
    target-to-source transform, and projects with K. Returns ``(grid, valid)``:
    the (2, H, W) grid Var and a boolean (H, W) mask that is False where the
    transformed point is at or behind ``MIN_PROJECTED_DEPTH``.
    """
    depth = T.as_var(depth)
    if depth.shape != (1, H, W):
        raise DimensionError(f"depth must be (1,{H},{W}), got {depth.shape}")
    if np.any(depth.value <= 0.0):
        raise DomainError("depth must be strictly positive")
    fx, fy, cx, cy = intr.pixel_params(W, H)
    grid0 = T.identity_grid(H, W)
    u = Var(grid0[0][None])
    v = Var(grid0[1][None])
    xn = (u - cx) / fx
    yn = (v - cy) / fy
    P = [depth * xn, depth * yn, depth]
    R = pose.rotation()
    t = pose.t
    Q = []
    for i in range(3):
        Q.append(P[0] * R[i, 0] + P[1] * R[i, 1] + P[2] * R[i, 2] + t[i])
    z = Q[2].value
    valid = z[0] > MIN_PROJECTED_DEPTH
    zc = T.clamp(Q[2], MIN_PROJECTED_DEPTH, None)
    us = fx * (Q[0] / zc) + cx
    vs = fy * (Q[1] / zc) + cy
    return T.concat([us, vs], axis=0), valid


def synthesize_view(source, grid):
    """Warped image: ``source`` sampled at ``grid``."""
    return T.bilinear_sample(source, grid)
