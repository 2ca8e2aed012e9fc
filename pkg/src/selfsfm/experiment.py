"""End-to-end recovery run on a rendered scene, shared by the CLI and the acceptance tests."""

from dataclasses import dataclass

import numpy as np

from .metrics import depth_metrics
from .optim import SfmProblem, optimize
from .synth import SyntheticScene, gen_sequence


def scene_from_config(cfg):
    return SyntheticScene(seed=cfg.seed, W=cfg.width, H=cfg.height, geometry=cfg.geometry)


def translation_angle_deg(est, gt):
    """Angle between two translation directions in degrees (0 if either is zero)."""
    a, b = np.asarray(est, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.degrees(np.arccos(np.clip(a @ b / (na * nb), -1.0, 1.0))))


@dataclass
class RecoveryReport:
    result: object
    sequence: object
    depth_eval: object
    translation_errors_deg: list
    intrinsics_rel_errors: dict

    def summary(self):
        fx, fy, cx, cy = self.result.intrinsics
        return {
            "abs_rel": self.depth_eval.abs_rel,
            "depth": self.depth_eval.to_dict(),
            "intrinsics": {"fx": fx, "fy": fy, "cx": cx, "cy": cy},
            "intrinsics_gt": dict(zip(("fx", "fy", "cx", "cy"), self.sequence.K_gt)),
            "intrinsics_rel_error": self.intrinsics_rel_errors,
            "translation_direction_error_deg": self.translation_errors_deg,
            "final_loss": self.result.final_loss,
            "steps": len(self.result.trace),
        }


def evaluate(result, sequence, target=1, sources=(0, 2)):
    gt_depth = sequence.gt_depths[target]
    dm = depth_metrics(result.depth, gt_depth, use_median_scaling=True)
    tdir = [translation_angle_deg(t, sequence.relative_pose(target, src).t.value)
            for (_, t), src in zip(result.poses, sources)]
    rel = {name: abs(est - gt) / gt for name, est, gt
           in zip(("fx", "fy", "cx", "cy"), result.intrinsics, sequence.K_gt)}
    return RecoveryReport(result, sequence, dm, tdir, rel)


def build_problem(cfg, sequence):
    return SfmProblem.from_frames(
        *sequence.frames[:3], cfg=cfg.loss_config(), seed=cfg.seed,
        with_uncertainty=cfg.with_uncertainty, learn_intrinsics=cfg.learn_intrinsics,
        intrinsics=(cfg.init_fx, cfg.init_fy, cfg.init_cx, cfg.init_cy), jitter=cfg.jitter)


def run_recovery(cfg, scene=None, callback=None):
    """Render the scene, optimize from the default initialization and score the result."""
    scene = scene or scene_from_config(cfg)
    seq = gen_sequence(scene, max(cfg.n_frames, 3))
    problem = build_problem(cfg, seq)
    result = optimize(problem, cfg.steps, lr_fn=cfg.lr_fn(), callback=callback)
    return evaluate(result, seq)
