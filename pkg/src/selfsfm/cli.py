"""Command-line entry point: ``selfsfm <subcommand> ...``.

Exit codes: 0 success, 1 contract violation or numerical failure, 2 malformed config.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, SfmError


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _outdir(args, cfg):
    d = Path(args.output_dir or cfg.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_config(args):
    cfg = io.RunConfig.load(args.config) if getattr(args, "config", None) else io.RunConfig()
    over = {k: getattr(args, k, None) for k in ("seed", "geometry", "width", "height", "steps",
                                               "n_frames")}
    if getattr(args, "size", None):
        over["width"], over["height"] = _parse_size(args.size)
    try:
        cfg = cfg.with_overrides(**over)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    cfg.validate()
    return cfg


def _parse_size(text):
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"size must look like 16x12, got {text!r}") from None
    return w, h


# ---------------------------------------------------------------- subcommands

def cmd_synth_gen(args):
    from .experiment import scene_from_config
    from .synth import gen_sequence

    cfg = _load_config(args)
    out = _outdir(args, cfg)
    seq = gen_sequence(scene_from_config(cfg), cfg.n_frames)
    for i, (img, depth) in enumerate(zip(seq.frames, seq.gt_depths)):
        io.write_ppm(out / f"frame_{i:03d}.ppm", img)
        io.write_pfm(out / f"depth_{i:03d}.pfm", depth)
    io.write_trajectory(out / "poses.txt", seq.gt_poses)
    fx, fy, cx, cy = seq.K_gt
    _dump_json(out / "scene.json", {"seed": cfg.seed, "geometry": cfg.geometry, "width": cfg.width,
                                    "height": cfg.height, "n_frames": cfg.n_frames,
                                    "intrinsics": {"fx": fx, "fy": fy, "cx": cx, "cy": cy}})
    print(f"wrote {cfg.n_frames} frames of a {cfg.geometry} scene to {out}")


def cmd_optimize(args):
    from .experiment import run_recovery

    cfg = _load_config(args)
    out = _outdir(args, cfg)
    report = run_recovery(cfg)
    res = report.result
    io.write_pfm(out / "depth.pfm", res.depth)
    if res.sigma is not None:
        io.write_pfm(out / "sigma.pfm", res.sigma)
    fx, fy, cx, cy = res.intrinsics
    _dump_json(out / "intrinsics.json", {"fx": fx, "fy": fy, "cx": cx, "cy": cy})
    with open(out / "trace.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in res.trace:
            w.writerow([step, repr(lr), repr(loss)])
    poses = {f"source{k}": {"omega": om.tolist(), "t": t.tolist()}
             for k, (om, t) in enumerate(res.poses)}
    _dump_json(out / "result.json", {**report.summary(), "poses": poses})
    cfg.save(out / "run.cfg")
    s = report.summary()
    print(f"abs_rel {s['abs_rel']:.4f}  fx {fx:.4f}  fy {fy:.4f}  "
          f"t-dir error {', '.join(f'{e:.2f}' for e in s['translation_direction_error_deg'])} deg")


def cmd_eval_depth(args):
    from .metrics import depth_metrics

    res = depth_metrics(io.read_pfm(args.pred), io.read_pfm(args.gt), cap=args.cap,
                        use_median_scaling=args.median_scale)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "depth_eval.json", res.to_dict())
    print("  ".join(f"{k} {v:.4f}" for k, v in zip(
        ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1", "d2", "d3"), res.as_tuple())))


def _relative(poses):
    return [np.linalg.inv(a) @ b for a, b in zip(poses, poses[1:])]


def cmd_eval_odom(args):
    from .metrics import aggregate, ate

    pred, gt = io.read_trajectory(args.pred), io.read_trajectory(args.gt)
    if len(pred) != len(gt):
        raise SfmError(f"trajectories differ in length: {len(pred)} vs {len(gt)}")
    n = args.window
    if len(gt) < n:
        raise SfmError(f"need at least {n} poses for one snippet, got {len(gt)}")
    pr, gr = _relative(pred), _relative(gt)
    errs = [ate(pr[i:i + n - 1], gr[i:i + n - 1], per_pair=args.per_pair)
            for i in range(len(gt) - n + 1)]
    res = aggregate(errs)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "odom_eval.json", {**res.to_dict(), "window": n, "per_pair": args.per_pair})
    print(f"ATE {res} over {res.count} snippets")


def _read_intrinsics(path):
    d = json.loads(Path(path).read_text())
    d = d.get("intrinsics", d)
    try:
        return tuple(float(d[k]) for k in ("fx", "fy", "cx", "cy"))
    except (KeyError, TypeError, ValueError):
        raise SfmError(f"{path}: expected fx, fy, cx, cy") from None


def cmd_eval_intrinsics(args):
    from .metrics import intrinsics_report

    gt = _read_intrinsics(args.gt)
    rep = intrinsics_report([_read_intrinsics(p) for p in args.estimates], gt)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "intrinsics_eval.json", rep.to_dict())
    print(rep.format())


def cmd_grad_check(args):
    from .optim import grad_check_problem, random_problem

    w, h = _parse_size(args.size)
    rep = grad_check_problem(random_problem(W=w, H=h, seed=args.seed), max_entries=args.max_entries)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ok = rep.max_relative_error < args.tol
    _dump_json(out / "grad_check.json", {"max_relative_error": rep.max_relative_error,
                                         "per_param": rep.per_param, "entries": rep.checked_entries,
                                         "tolerance": args.tol, "passed": ok})
    print(f"max relative error {rep.max_relative_error:.3e} over {rep.checked_entries} entries "
          f"({'ok' if ok else 'above'} {args.tol:g})")
    return 0 if ok else 1


def cmd_upsample_demo(args):
    from . import tensor as T
    from .subpixel import icnr_init, kaiming_uniform, nn_upsample, phase_variance

    rng = np.random.default_rng(args.seed)
    r, C, O = 2, 3, 4
    x = rng.standard_normal((C, 12, 12))
    const = np.ones((C, 12, 12))
    icnr = icnr_init(O * r * r, C, 3, r, seed=args.seed)
    rand = kaiming_uniform((O * r * r, C, 3, 3), seed=args.seed)
    base = icnr[::r * r]

    def up(inp, k):
        return T.pixel_shuffle(T.conv2d(T.const(inp), T.const(k), pad=1), r).value

    nn_ref = nn_upsample(T.conv2d(T.const(x), T.const(base), pad=1).value, r)
    report = {
        "icnr_vs_nearest_max_abs": float(np.max(np.abs(up(x, icnr) - nn_ref))),
        "icnr_constant_phase_variance": float(phase_variance(up(const, icnr), r).max()),
        "random_constant_phase_variance": float(phase_variance(up(const, rand), r).max()),
    }
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _dump_json(out / "upsample_demo.json", report)
    for k, v in report.items():
        print(f"{k:34s} {v:.3e}")


# -------------------------------------------------------------------- parser

def build_parser():
    p = argparse.ArgumentParser(prog="selfsfm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def scene_args(sp):
        sp.add_argument("--config", help="key = value run configuration")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--geometry", choices=("fronto", "slanted", "staircase"))
        sp.add_argument("--width", type=int)
        sp.add_argument("--height", type=int)
        sp.add_argument("--output-dir")

    sp = sub.add_parser("synth-gen", help="render a synthetic sequence with ground truth")
    scene_args(sp)
    sp.add_argument("--n-frames", dest="n_frames", type=int)
    sp.set_defaults(func=cmd_synth_gen)

    sp = sub.add_parser("optimize", help="recover depth, poses and intrinsics on a rendered scene")
    scene_args(sp)
    sp.add_argument("--steps", type=int)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("eval-depth", help="seven depth metrics of a predicted PFM")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--median-scale", action="store_true")
    sp.add_argument("--cap", type=float, default=80.0)
    sp.add_argument("--output-dir", default=".")
    sp.set_defaults(func=cmd_eval_depth)

    sp = sub.add_parser("eval-odom", help="snippet ATE between two trajectory files")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--window", type=int, default=5, help="frames per snippet")
    sp.add_argument("--per-pair", action="store_true", help="average per-pair errors")
    sp.add_argument("--output-dir", default=".")
    sp.set_defaults(func=cmd_eval_odom)

    sp = sub.add_parser("eval-intrinsics", help="mean and std of estimated intrinsics")
    sp.add_argument("--estimates", nargs="+", required=True, help="intrinsics.json files")
    sp.add_argument("--gt", required=True, help="JSON with fx, fy, cx, cy (scene.json works)")
    sp.add_argument("--output-dir", default=".")
    sp.set_defaults(func=cmd_eval_intrinsics)

    sp = sub.add_parser("grad-check", help="finite-difference check of the full loss")
    sp.add_argument("--size", default="16x12")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-entries", type=int)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.add_argument("--output-dir", default=".")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("upsample-demo", help="ICNR against random init for sub-pixel upsampling")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output-dir", default=".")
    sp.set_defaults(func=cmd_upsample_demo)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SfmError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
