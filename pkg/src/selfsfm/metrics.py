"""Depth, trajectory and intrinsics evaluation."""

from dataclasses import asdict, dataclass

import numpy as np

from .camera import Intrinsics, PoseSE3
from .errors import DimensionError, DomainError

DEPTH_FLOOR = 1e-3
DEPTH_CAP = 80.0


# ----------------------------------------------------------------------- depth

def _arr(x):
    return np.asarray(getattr(x, "value", x), dtype=np.float64)


def median_scale(pred, gt, mask=None):
    """Scale ``pred`` by median(gt[mask]) / median(pred[mask]); returns (scaled, ratio)."""
    pred, gt = _arr(pred), _arr(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    mask = np.ones(gt.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise DomainError("median scaling needs at least one masked pixel")
    med_pred = np.median(pred[mask])
    if med_pred == 0.0:
        raise DomainError("median of the prediction is zero")
    ratio = float(np.median(gt[mask]) / med_pred)
    return pred * ratio, ratio


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixel_count: int
    scale_ratio: float = 1.0

    def as_tuple(self):
        return (self.abs_rel, self.sq_rel, self.rmse, self.rmse_log,
                self.delta1, self.delta2, self.delta3)

    def to_dict(self):
        return asdict(self)


def depth_metrics(pred, gt, cap=DEPTH_CAP, use_median_scaling=False):
    """The seven standard depth errors over pixels with gt in (1e-3, cap].

    With ``use_median_scaling`` the prediction is first scaled by the ratio of
    medians over the valid pixels. It is then clamped to [1e-3, cap].
    """
    pred, gt = _arr(pred), _arr(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"pred {pred.shape} vs gt {gt.shape}")
    valid = (gt > DEPTH_FLOOR) & (gt <= cap)
    if not valid.any():
        raise DomainError("no ground-truth pixel inside the valid depth range")
    ratio = 1.0
    if use_median_scaling:
        pred, ratio = median_scale(pred, gt, valid)
    p = np.clip(pred[valid], DEPTH_FLOOR, cap)
    g = gt[valid]
    diff = p - g
    thresh = np.maximum(p / g, g / p)
    return DepthEvalResult(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff ** 2 / g)),
        rmse=float(np.sqrt(np.mean(diff ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25 ** 2)),
        delta3=float(np.mean(thresh < 1.25 ** 3)),
        valid_pixel_count=int(valid.sum()),
        scale_ratio=ratio,
    )


# ------------------------------------------------------------------ trajectory

def _mat(pose):
    if isinstance(pose, PoseSE3):
        return pose.matrix()
    m = np.asarray(pose, dtype=np.float64)
    if m.shape == (3, 4):
        m = np.vstack([m, [0.0, 0.0, 0.0, 1.0]])
    if m.shape != (4, 4):
        raise DimensionError(f"pose must be 4x4, 3x4 or PoseSE3, got shape {m.shape}")
    return m


def compose_positions(relative):
    """Camera centres of a snippet anchored at frame 0.

    ``relative[i]`` is the pose of camera i+1 expressed in camera i, so the
    absolute pose of frame i+1 is ``M_i @ relative[i]``.
    """
    M = np.eye(4)
    out = [M[:3, 3].copy()]
    for rel in relative:
        M = M @ _mat(rel)
        out.append(M[:3, 3].copy())
    return np.array(out)


def align_scale(pred_xyz, gt_xyz):
    """Least-squares s minimizing sum |s p - g|^2."""
    gt_energy = float(np.sum(gt_xyz * gt_xyz))
    if gt_energy == 0.0:
        raise DomainError("ground-truth trajectory has zero length; scale is undefined")
    denom = float(np.sum(pred_xyz * pred_xyz))
    if denom == 0.0:
        return 1.0
    return float(np.sum(pred_xyz * gt_xyz)) / denom


def _rmse(pred_xyz, gt_xyz):
    s = align_scale(pred_xyz, gt_xyz)
    return float(np.sqrt(np.mean(np.sum((s * pred_xyz - gt_xyz) ** 2, axis=1))))


def ate(pred_relative, gt_relative, per_pair=False):
    """Absolute trajectory error of one snippet, on translations.

    Default: compose both snippets from frame 0, fit one scale, RMSE over
    all positions. ``per_pair=True`` instead scores each consecutive pair
    as its own two-frame trajectory and averages the pair errors.
    """
    if len(pred_relative) != len(gt_relative):
        raise DimensionError(f"snippet lengths differ: {len(pred_relative)} vs {len(gt_relative)}")
    if not gt_relative:
        raise DimensionError("empty snippet")
    if not per_pair:
        return _rmse(compose_positions(pred_relative), compose_positions(gt_relative))
    errs = [_rmse(compose_positions([p]), compose_positions([g]))
            for p, g in zip(pred_relative, gt_relative)]
    return float(np.mean(errs))


@dataclass(frozen=True)
class AteResult:
    mean: float
    std: float
    count: int

    def __str__(self):
        return f"{self.mean:.4f} ± {self.std:.4f}"

    def to_dict(self):
        return asdict(self)


def aggregate(values):
    """Mean and population std over per-snippet errors."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise DomainError("nothing to aggregate")
    return AteResult(float(v.mean()), float(v.std()), int(v.size))


# ------------------------------------------------------------------ intrinsics

INTRINSIC_LABELS = {
    "fx": "Horizontal focal length",
    "fy": "Vertical focal length",
    "cx": "Horizontal principal point",
    "cy": "Vertical principal point",
}


def _normalized(est):
    if isinstance(est, Intrinsics):
        return est.normalized()
    t = tuple(float(v) for v in est)
    if len(t) != 4:
        raise DimensionError("intrinsics need four values (fx, fy, cx, cy)")
    return t


@dataclass(frozen=True)
class IntrinsicsRow:
    name: str
    mean: float
    std: float
    gt: float

    def format(self):
        return f"{INTRINSIC_LABELS[self.name]:<28} {self.mean:.4f} ± {self.std:.4f}   gt {self.gt:.4f}"


@dataclass(frozen=True)
class IntrinsicsReport:
    rows: tuple
    count: int

    def row(self, name):
        return next(r for r in self.rows if r.name == name)

    def format(self):
        return "\n".join(r.format() for r in self.rows)

    def to_dict(self):
        return {"count": self.count,
                **{r.name: {"mean": r.mean, "std": r.std, "gt": r.gt} for r in self.rows}}


def intrinsics_report(estimates, gt):
    """Per-parameter mean and population std of normalized intrinsics next to ground truth."""
    est = [_normalized(e) for e in estimates]
    if not est:
        raise DomainError("no intrinsics estimates")
    arr = np.array(est)
    g = _normalized(gt)
    rows = tuple(IntrinsicsRow(name, float(arr[:, i].mean()), float(arr[:, i].std()), g[i])
                 for i, name in enumerate(INTRINSIC_LABELS))
    return IntrinsicsReport(rows, len(est))
