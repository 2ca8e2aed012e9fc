import json
import subprocess
import sys

import numpy as np
import pytest

from selfsfm import io
from selfsfm.cli import main

SMALL = ["--width", "32", "--height", "24"]


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def _run_twice(tmp_path, argv):
    outs = []
    for k in range(2):
        d = tmp_path / f"run{k}"
        assert main([*argv, "--output-dir", str(d)]) == 0
        outs.append(_files(d))
    assert outs[0] == outs[1]
    return tmp_path / "run0", outs[0]


def test_synth_gen(tmp_path):
    d, files = _run_twice(tmp_path, ["synth-gen", *SMALL, "--n-frames", "4", "--seed", "3"])
    assert {"frame_000.ppm", "frame_003.ppm", "depth_003.pfm", "poses.txt", "scene.json"} <= set(files)
    scene = json.loads(files["scene.json"])
    assert scene["n_frames"] == 4 and set(scene["intrinsics"]) == {"fx", "fy", "cx", "cy"}
    assert io.read_pfm(d / "depth_000.pfm").shape == (24, 32)
    assert len(io.read_trajectory(d / "poses.txt")) == 4


def test_optimize(tmp_path):
    d, files = _run_twice(tmp_path, ["optimize", *SMALL, "--steps", "12"])
    assert {"depth.pfm", "intrinsics.json", "trace.csv", "result.json", "run.cfg"} <= set(files)
    assert len(files["trace.csv"].decode().splitlines()) == 13
    res = json.loads(files["result.json"])
    assert res["steps"] == 12 and np.isfinite(res["abs_rel"])
    cfg = io.RunConfig.load(d / "run.cfg")
    assert cfg.steps == 12 and cfg.width == 32


def test_eval_depth(tmp_path):
    gt = np.array([[1.0, 4.0]])
    io.write_pfm(tmp_path / "gt.pfm", gt)
    io.write_pfm(tmp_path / "pred.pfm", np.array([[2.0, 4.0]]))
    _, files = _run_twice(tmp_path, ["eval-depth", "--pred", str(tmp_path / "pred.pfm"),
                                     "--gt", str(tmp_path / "gt.pfm")])
    rep = json.loads(files["depth_eval.json"])
    assert rep["abs_rel"] == 0.5 and rep["delta1"] == 0.5


def test_eval_odom(tmp_path, rng):
    poses = [np.eye(4)]
    for _ in range(7):
        step = np.eye(4)
        step[:3, 3] = rng.standard_normal(3)
        poses.append(poses[-1] @ step)
    io.write_trajectory(tmp_path / "gt.txt", poses)
    io.write_trajectory(tmp_path / "pred.txt", [np.diag([1, 1, 1, 1.0]) @ p for p in poses])
    _, files = _run_twice(tmp_path, ["eval-odom", "--pred", str(tmp_path / "pred.txt"),
                                     "--gt", str(tmp_path / "gt.txt")])
    rep = json.loads(files["odom_eval.json"])
    assert rep["count"] == 4 and rep["mean"] < 1e-12
    io.write_trajectory(tmp_path / "short.txt", poses[:3])
    assert main(["eval-odom", "--pred", str(tmp_path / "short.txt"), "--gt",
                 str(tmp_path / "gt.txt"), "--output-dir", str(tmp_path)]) == 1


def test_eval_intrinsics(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps({"fx": 0.4, "fy": 1.0, "cx": 0.5, "cy": 0.5}))
    (tmp_path / "b.json").write_text(json.dumps({"fx": 0.6, "fy": 1.0, "cx": 0.5, "cy": 0.5}))
    (tmp_path / "gt.json").write_text(json.dumps({"intrinsics": {"fx": 0.5, "fy": 1, "cx": 0.5,
                                                                 "cy": 0.5}}))
    _, files = _run_twice(tmp_path, ["eval-intrinsics", "--estimates", str(tmp_path / "a.json"),
                                     str(tmp_path / "b.json"), "--gt", str(tmp_path / "gt.json")])
    assert json.loads(files["intrinsics_eval.json"])["count"] == 2


def test_grad_check_command(tmp_path):
    _, files = _run_twice(tmp_path, ["grad-check", "--size", "8x6", "--max-entries", "40"])
    rep = json.loads(files["grad_check.json"])
    assert rep["passed"] and rep["max_relative_error"] < 1e-4
    assert main(["grad-check", "--size", "8x6", "--max-entries", "5", "--tol", "0",
                 "--output-dir", str(tmp_path)]) == 1


def test_upsample_demo(tmp_path):
    _, files = _run_twice(tmp_path, ["upsample-demo", "--seed", "2"])
    rep = json.loads(files["upsample_demo.json"])
    assert rep["icnr_vs_nearest_max_abs"] < 1e-12
    assert rep["icnr_constant_phase_variance"] == 0.0
    assert rep["random_constant_phase_variance"] > 0.0


def test_exit_codes(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("no_such_key = 1\n")
    assert main(["synth-gen", "--config", str(bad), "--output-dir", str(tmp_path)]) == 2
    assert main(["grad-check", "--size", "sixteen", "--output-dir", str(tmp_path)]) == 2
    assert main(["eval-depth", "--pred", str(tmp_path / "missing.pfm"), "--gt",
                 str(tmp_path / "missing.pfm")]) == 1
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "selfsfm.cli", "upsample-demo", "--output-dir",
                           str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0 and "icnr_vs_nearest_max_abs" in proc.stdout
