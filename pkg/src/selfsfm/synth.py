"""Seeded synthetic scenes: textured planes seen by a moving pinhole camera.

Depth is exact (analytic ray-plane intersection) and the texture is sampled
with the same bilinear kernel the warp uses.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .camera import Intrinsics, PoseSE3, so3_exp_np

GEOMETRIES = ("fronto", "slanted", "staircase")


def _smooth_noise(rng, H, W, cell):
    """One octave of value noise with smoothstep interpolation between lattice values."""
    gh, gw = H // cell + 2, W // cell + 2
    lattice = rng.random((gh, gw))
    ys = np.arange(H) / cell
    xs = np.arange(W) / cell
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = ys - y0, xs - x0
    fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    fx, fy = fx[None, :], fy[:, None]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def gen_texture(seed, W, H, octaves=4, base_cell=32):
    """Multi-octave value noise, (3, H, W), each channel rescaled to [0, 1]."""
    if W <= 0 or H <= 0:
        raise ValueError("texture size must be positive")
    rng = np.random.default_rng(seed)
    img = np.zeros((3, H, W))
    for c in range(3):
        amp, cell = 1.0, base_cell
        for _ in range(octaves):
            img[c] += amp * _smooth_noise(rng, H, W, max(cell, 1))
            amp *= 0.5
            cell = max(cell // 2, 1)
        lo, hi = img[c].min(), img[c].max()
        img[c] = (img[c] - lo) / (hi - lo) if hi > lo else 0.5
    return img


@dataclass
class SyntheticScene:
    """Static textured surface plus a constant-velocity camera trajectory.

    ``geometry``:
        fronto: plane z = depth0.
        slanted: plane through (0, 0, depth0) with normal ``normal``.
        staircase: two planes z = depth0 + slopes[i] * x meeting at x = 0.
    Poses are camera-to-world. Frame i composes the first i entries of
    ``motion`` (cycled), each a (rotation vector, translation) step expressed
    in the previous camera; ``motion=None`` repeats
    (``step_rotation``, ``step_translation``).
    """

    seed: int = 0
    W: int = 128
    H: int = 96
    geometry: str = "slanted"
    depth0: float = 3.0
    normal: tuple = (0.0, -0.15, 1.0)
    slopes: tuple = (-0.3, 0.3)
    K_gt: tuple = (0.55, 0.55, 0.5, 0.5)
    step_translation: tuple = (0.15, 0.0, 0.1)
    step_rotation: tuple = (0.0, -0.04, 0.0)
    texels_per_unit: float = 32.0
    texture_cell: int = 32
    texture_octaves: int = 4
    texture_extent: float = 4.0
    motion: tuple = None

    def __post_init__(self):
        if self.geometry not in GEOMETRIES:
            raise ValueError(f"geometry must be one of {GEOMETRIES}")

    def intrinsics(self, requires_grad=False):
        return Intrinsics.from_normalized(*self.K_gt, requires_grad=requires_grad)

    def pose(self, i):
        """Camera-to-world pose of frame ``i`` as a 4x4 matrix."""
        steps = self.motion or ((self.step_rotation, self.step_translation),)
        M = np.eye(4)
        for k in range(i):
            rot, trans = steps[k % len(steps)]
            step = np.eye(4)
            step[:3, :3] = so3_exp_np(rot)
            step[:3, 3] = trans
            M = M @ step
        return M

    def planes(self):
        """List of (point, normal, side) where side(x) tells whether a hit belongs to the plane."""
        d0 = self.depth0
        if self.geometry == "fronto":
            return [(np.array([0.0, 0.0, d0]), np.array([0.0, 0.0, 1.0]), None)]
        if self.geometry == "slanted":
            n = np.asarray(self.normal, dtype=np.float64)
            return [(np.array([0.0, 0.0, d0]), n / np.linalg.norm(n), None)]
        s1, s2 = self.slopes
        p = np.array([0.0, 0.0, d0])
        return [(p, np.array([-s1, 0.0, 1.0]), lambda X: X[0] < 0.0),
                (p, np.array([-s2, 0.0, 1.0]), lambda X: X[0] >= 0.0)]


class SceneError(ValueError):
    """Scene construction violates its invariants (e.g. a ray misses the surface)."""


def _pixel_rays(K, W, H):
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    pix = np.stack([xs, ys, np.ones_like(xs)]).reshape(3, -1)
    return np.linalg.solve(K, pix)  # z component is 1


def _intersect(scene, M, K):
    """Ray-cast frame with camera-to-world ``M``: world hit points (3, N) and camera depth (N,)."""
    W, H = scene.W, scene.H
    rays_c = _pixel_rays(K, W, H)
    R, o = M[:3, :3], M[:3, 3]
    dirs = R @ rays_c
    best = np.full(rays_c.shape[1], np.inf)
    for p0, n, side in scene.planes():
        denom = n @ dirs
        if np.any(np.abs(denom) < 1e-12):
            raise SceneError("camera ray parallel to the surface")
        lam = (n @ (p0 - o)) / denom
        X = o[:, None] + lam * dirs
        ok = lam > 0
        if side is not None:
            ok &= side(X)
        best = np.where(ok & (lam < best), lam, best)
    if not np.all(np.isfinite(best)):
        raise SceneError("some pixels see no surface in front of the camera")
    hits = o[:, None] + best * dirs
    return hits, best  # rays have unit z, so lambda is the camera-frame depth


@dataclass
class Sequence:
    frames: list
    gt_depths: list
    gt_poses: list  # camera-to-world PoseSE3
    K_gt: tuple
    scene: SyntheticScene = field(repr=False, default=None)

    def relative_pose(self, target, source):
        """Target-to-source transform: maps target-camera points into the source camera."""
        Mt = self.gt_poses[target].matrix()
        Ms = self.gt_poses[source].matrix()
        return PoseSE3.from_matrix(np.linalg.inv(Ms) @ Mt)

    def trios(self):
        """Indices (t-1, t, t+1) of every training trio."""
        return [(i - 1, i, i + 1) for i in range(1, len(self.frames) - 1)]

    def relative_steps(self):
        """Frame i to i+1 transforms as 4x4 matrices (camera i+1 <- camera i)."""
        return [np.linalg.inv(self.gt_poses[i + 1].matrix()) @ self.gt_poses[i].matrix()
                for i in range(len(self.gt_poses) - 1)]


def scene_texture(scene):
    """Texture image covering the square [-extent, extent]^2 of world (x, y)."""
    size = int(np.ceil(2 * scene.texture_extent * scene.texels_per_unit)) + 1
    return gen_texture(scene.seed, size, size, octaves=scene.texture_octaves,
                       base_cell=scene.texture_cell)


def render_frame(scene, pose_index, texture=None):
    """Render frame ``pose_index``: (image (3, H, W), gt depth (1, H, W))."""
    if pose_index < 0:
        raise IndexError("pose_index must be non-negative")
    tex = scene_texture(scene) if texture is None else texture
    K = scene.intrinsics().matrix_np(scene.W, scene.H)
    hits, depth = _intersect(scene, scene.pose(pose_index), K)
    if np.any(np.abs(hits[:2]) > scene.texture_extent):
        raise SceneError("view leaves the textured region; raise texture_extent")
    tx = ((hits[0] + scene.texture_extent) * scene.texels_per_unit).reshape(scene.H, scene.W)
    ty = ((hits[1] + scene.texture_extent) * scene.texels_per_unit).reshape(scene.H, scene.W)
    img = kernels.bilinear_forward(tex, tx, ty)
    return img, depth.reshape(1, scene.H, scene.W)


def gen_sequence(scene, n_frames=3):
    """Render ``n_frames`` consecutive frames with their ground truth."""
    if n_frames < 3:
        raise ValueError("need at least 3 frames")
    texture = scene_texture(scene)
    frames, depths, poses = [], [], []
    for i in range(n_frames):
        img, depth = render_frame(scene, i, texture)
        frames.append(img)
        depths.append(depth)
        poses.append(PoseSE3.from_matrix(scene.pose(i)))
    return Sequence(frames, depths, poses, tuple(scene.K_gt), scene)
