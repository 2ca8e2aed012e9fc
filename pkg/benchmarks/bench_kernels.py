"""Compiled vs numpy kernels, plus one full loss-and-gradient step of the recovery problem.

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from selfsfm import kernels
from selfsfm.io import RunConfig


def cases(rng):
    C, H, W = 3, 96, 128
    src = rng.random((C, H, W))
    gx = rng.uniform(-2, W + 1, (H, W))
    gy = rng.uniform(-2, H + 1, (H, W))
    gout = rng.standard_normal((C, H, W))
    x = rng.standard_normal((16, 48, 64))
    w = rng.standard_normal((16, 16, 3, 3))
    cout = rng.standard_normal((16, 46, 62))
    return {
        "bilinear_forward 3x96x128": lambda: kernels.bilinear_forward(src, gx, gy),
        "bilinear_backward 3x96x128": lambda: kernels.bilinear_backward(src, gx, gy, gout),
        "box3_reflect 3x96x128": lambda: kernels.box3_reflect(src),
        "box3_reflect_adjoint 3x96x128": lambda: kernels.box3_reflect_adjoint(gout),
        "conv2d_forward 16x48x64 k3": lambda: kernels.conv2d_forward(x, w),
        "conv2d_backward 16x48x64 k3": lambda: kernels.conv2d_backward(x, w, cout),
    }


def loss_step():
    from selfsfm.experiment import build_problem, scene_from_config
    from selfsfm.synth import gen_sequence

    cfg = RunConfig()
    problem = build_problem(cfg, gen_sequence(scene_from_config(cfg), 3))
    return lambda: problem.loss_and_grads()


def best_of(fn, repeat):
    fn()  # warm-up
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    rows = []
    for name in list(cases(np.random.default_rng(0))) + ["loss_and_grads 128x96, 4 scales"]:
        times = {}
        for b in backends:
            kernels.use_backend(b)
            fn = loss_step() if name.startswith("loss") else cases(np.random.default_rng(0))[name]
            times[b] = best_of(fn, args.repeat)
        rows.append((name, times))
    kernels.use_backend(backends[0] if "compiled" not in backends else "compiled")
    head = f"{'kernel':34s}" + "".join(f"{b:>12s}" for b in backends)
    print(head + ("     speedup" if len(backends) == 2 else ""))
    for name, times in rows:
        line = f"{name:34s}" + "".join(f"{times[b] * 1e3:10.2f}ms" for b in backends)
        if len(backends) == 2:
            line += f"{times['python'] / times['compiled']:11.1f}x"
        print(line)


if __name__ == "__main__":
    main()
