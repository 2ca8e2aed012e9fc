"""File formats (PFM, PPM, trajectory) and the key=value run configuration."""

import math
import re
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError

# ------------------------------------------------------------------------ PFM


def write_pfm(path, data):
    """Grayscale little-endian PFM. Accepts (H, W) or (1, H, W); stored as float32."""
    a = np.asarray(getattr(data, "value", data), dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise FormatError(f"PFM writer expects a single-channel map, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise FormatError("refusing to write non-finite values to PFM")
    H, W = a.shape
    header = f"Pf\n{W} {H}\n-1.0\n".encode("ascii")
    body = np.flipud(a).astype("<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_pfm(path):
    """Read a grayscale PFM into a float64 (H, W) array (top row first)."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise FormatError("truncated PFM header")
    magic, dims, scale_line, body = parts
    magic = magic.strip()
    if magic == b"PF":
        raise FormatError("colour PFM ('PF') is not supported; expected 'Pf'")
    if magic != b"Pf":
        raise FormatError(f"bad PFM magic {magic!r}")
    try:
        W, H = (int(v) for v in dims.split())
        scale = float(scale_line)
    except ValueError as exc:
        raise FormatError(f"malformed PFM header: {exc}") from None
    if W <= 0 or H <= 0 or scale == 0.0:
        raise FormatError("malformed PFM header")
    dtype = "<f4" if scale < 0 else ">f4"
    if len(body) != 4 * W * H:
        raise FormatError(f"PFM body has {len(body)} bytes, expected {4 * W * H}")
    return np.flipud(np.frombuffer(body, dtype=dtype).reshape(H, W)).astype(np.float64)


# ------------------------------------------------------------------------ PPM


def write_ppm(path, image):
    """Binary P6 with maxval 255 from a (3, H, W) image in [0, 1]."""
    a = np.asarray(getattr(image, "value", image), dtype=np.float64)
    if a.ndim != 3 or a.shape[0] != 3:
        raise FormatError(f"PPM writer expects (3, H, W), got {a.shape}")
    _, H, W = a.shape
    q = np.rint(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes())


_PPM_HEADER = re.compile(rb"\AP6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s")


def read_ppm(path):
    """Read a binary P6 file into a (3, H, W) float64 image in [0, 1]."""
    raw = Path(path).read_bytes()
    m = _PPM_HEADER.match(raw)
    if m is None:
        raise FormatError("not a binary PPM (P6) file")
    W, H, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    body = raw[m.end():]
    if len(body) != 3 * W * H:
        raise FormatError(f"PPM body has {len(body)} bytes, expected {3 * W * H}")
    return np.frombuffer(body, dtype=np.uint8).reshape(H, W, 3).transpose(2, 0, 1) / 255.0


# ----------------------------------------------------------------- trajectory


def _fmt(v):
    s = f"{v:.12g}"
    return "0" if s == "-0" else s


def format_pose_line(M):
    M = np.asarray(M, dtype=np.float64)
    return " ".join(_fmt(v) for v in M[:3, :4].ravel())


def write_trajectory(path, poses):
    """One camera-to-world pose per line: row-major 3x4 [R|t], 12 significant digits."""
    lines = []
    for p in poses:
        M = p.matrix() if hasattr(p, "matrix") else np.asarray(p, dtype=np.float64)
        if M.shape not in ((3, 4), (4, 4)):
            raise FormatError(f"pose must be 3x4 or 4x4, got {M.shape}")
        lines.append(format_pose_line(M))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory(path):
    """List of 4x4 camera-to-world matrices."""
    out = []
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        vals = line.split()
        if len(vals) != 12:
            raise FormatError(f"line {n}: expected 12 numbers, got {len(vals)}")
        try:
            M = np.array([float(v) for v in vals]).reshape(3, 4)
        except ValueError:
            raise FormatError(f"line {n}: non-numeric field") from None
        out.append(np.vstack([M, [0.0, 0.0, 0.0, 1.0]]))
    return out


# ------------------------------------------------------------------ RunConfig

_DOCS = {
    "seed": "scene and initialization seed",
    "geometry": "synthetic surface: fronto, slanted or staircase",
    "width": "image width in pixels",
    "height": "image height in pixels",
    "n_frames": "frames rendered by synth-gen",
    "steps": "Adam iterations",
    "base_lr": "learning rate before the decay boundary",
    "lr_decay": "multiplier applied after the boundary",
    "lr_boundary": "fraction of steps run at base_lr",
    "with_uncertainty": "optimize a per-pixel uncertainty map",
    "learn_intrinsics": "optimize fx, fy, cx, cy (otherwise fixed at init_fx..init_cy)",
    "init_fx": "normalized initial fx",
    "init_fy": "normalized initial fy",
    "init_cx": "normalized initial cx",
    "init_cy": "normalized initial cy",
    "jitter": "half-width of the uniform noise on initial disparity logits",
    "n_scales": "number of pyramid scales",
    "alpha": "SSIM weight in the photometric error",
    "smooth_weight": "edge-aware smoothness weight at full resolution",
    "smooth_scale_decay": "divide the smoothness weight by 2^s at scale s",
    "ssim_c1": "SSIM stabilizer C1",
    "ssim_c2": "SSIM stabilizer C2",
    "sigma_min": "lower clamp of the uncertainty",
    "min_depth": "depth at disparity 1",
    "max_depth": "depth at disparity 0",
    "output_dir": "directory receiving all outputs",
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    geometry: str = "slanted"
    width: int = 128
    height: int = 96
    n_frames: int = 3
    steps: int = 3000
    base_lr: float = 1e-4
    lr_decay: float = 0.1
    lr_boundary: float = 0.6
    with_uncertainty: bool = False
    learn_intrinsics: bool = True
    init_fx: float = 0.5
    init_fy: float = 0.5
    init_cx: float = 0.5
    init_cy: float = 0.5
    jitter: float = 1e-3
    n_scales: int = 4
    alpha: float = 0.85
    smooth_weight: float = 1e-3
    smooth_scale_decay: bool = True
    ssim_c1: float = 1e-4
    ssim_c2: float = 9e-4
    sigma_min: float = 0.01
    min_depth: float = 0.1
    max_depth: float = 100.0
    output_dir: str = "out"

    @staticmethod
    def doc(key):
        return _DOCS[key]

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def loss_config(self):
        from .losses import LossConfig

        return LossConfig(alpha=self.alpha, smooth_weight=self.smooth_weight,
                          smooth_scale_decay=self.smooth_scale_decay, ssim_c1=self.ssim_c1,
                          ssim_c2=self.ssim_c2, sigma_min=self.sigma_min, n_scales=self.n_scales,
                          min_depth=self.min_depth, max_depth=self.max_depth)

    def lr_fn(self):
        from .optim import lr_schedule

        return lambda step, total: lr_schedule(step, total, self.base_lr, self.lr_decay,
                                               self.lr_boundary)

    def with_overrides(self, **kw):
        return replace(self, **{k: v for k, v in kw.items() if v is not None})

    def dumps(self):
        out = []
        for f in fields(self):
            out.append(f"# {_DOCS[f.name]}")
            out.append(f"{f.name} = {_format_value(getattr(self, f.name))}")
        return "\n".join(out) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text):
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {n}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {n}: duplicate key {key!r}")
            values[key] = _parse_value(types[key], val, n, key)
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls.loads(text)

    def validate(self):
        if self.width < 2 or self.height < 2:
            raise ConfigError("width and height must be >= 2")
        if self.steps < 1 or self.n_frames < 3 or self.n_scales < 1:
            raise ConfigError("steps >= 1, n_frames >= 3 and n_scales >= 1 required")
        if not 0.0 < self.lr_boundary <= 1.0:
            raise ConfigError("lr_boundary must lie in (0, 1]")
        if not 0.0 < self.min_depth < self.max_depth:
            raise ConfigError("need 0 < min_depth < max_depth")


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_BOOLS = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _parse_value(typ, val, n, key):
    typ = {"int": int, "float": float, "bool": bool, "str": str}.get(typ, typ)
    try:
        if typ is bool:
            return _BOOLS[val.lower()]
        if typ is int:
            return int(val)
        if typ is float:
            x = float(val)
            if not math.isfinite(x):
                raise ValueError
            return x
    except (KeyError, ValueError):
        raise ConfigError(f"line {n}: bad value {val!r} for {key}") from None
    if not val:
        raise ConfigError(f"line {n}: empty value for {key}")
    return val
