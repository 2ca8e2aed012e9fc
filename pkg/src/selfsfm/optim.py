"""Photometric bundle adjustment with Adam over per-pixel disparity, poses
and intrinsics."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .camera import Intrinsics, PoseSE3, softplus_inverse
from .errors import DivergenceError
from .losses import LossConfig, identity_errors, scale_shape, total_loss
from .subpixel import disparity_to_depth
from .tensor import Var

logger = logging.getLogger(__name__)


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays; parameters without a
    gradient entry are left unchanged. Returns ``(new_params, new_state)``
    without mutating the inputs.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {name!r} at step {state.step + 1}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, m_new, v_new = dict(params), dict(state.m), dict(state.v)
    for name, p in params.items():
        if name not in grads:
            continue
        g = grads[name]
        m = b1 * state.m.get(name, np.zeros_like(p)) + (1.0 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(p)) + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t, b1, b2, state.eps)


def lr_schedule(step, total, base_lr=1e-4, decay=0.1, boundary=0.6):
    """Piecewise constant: ``base_lr`` for the first ``boundary`` share of steps, then ``base_lr * decay``.

    The default 60/40 split maps 15 + 10 epochs onto a step budget.
    """
    if not 0 <= step < total:
        raise ValueError(f"step {step} outside [0, {total})")
    return base_lr if step < int(round(boundary * total)) else base_lr * decay


# --------------------------------------------------------------------- problem

@dataclass
class SfmProblem:
    """Target frame with two sources and the free parameters explaining them.

    Parameter names: ``disp{s}`` (pre-sigmoid disparity at scale s, 0 = full
    resolution), ``uncert{s}`` (pre-sigmoid uncertainty, optional), ``omega{k}``
    and ``t{k}`` (target-to-source pose for source k), ``raw_fx``, ``raw_fy``,
    ``cx``, ``cy`` (intrinsics, only when learned).
    """

    target: np.ndarray
    sources: list
    params: dict
    cfg: LossConfig
    learn_intrinsics: bool = True
    fixed_intrinsics: tuple = (0.5, 0.5, 0.5, 0.5)
    with_uncertainty: bool = False
    _ident: list = field(default=None, repr=False)

    @classmethod
    def from_frames(cls, prev, target, nxt, cfg=None, seed=0, with_uncertainty=False,
                    learn_intrinsics=True, intrinsics=(0.5, 0.5, 0.5, 0.5), jitter=1e-3):
        """Default initialization: disparity logits ~0 (seeded jitter), identity poses,
        intrinsics at ``intrinsics`` (normalized)."""
        cfg = cfg or LossConfig()
        target = np.asarray(target, dtype=np.float64)
        C, H, W = target.shape
        if H % 2 ** (cfg.n_scales - 1) or W % 2 ** (cfg.n_scales - 1):
            logger.debug("image size %sx%s not divisible by coarsest scale; sizes floor", W, H)
        rng = np.random.default_rng(seed)
        params = {}
        for s in range(cfg.n_scales):
            h, w = scale_shape(H, W, s)
            params[f"disp{s}"] = rng.uniform(-jitter, jitter, size=(1, h, w))
        if with_uncertainty:
            for s in range(cfg.n_scales):
                params[f"uncert{s}"] = np.zeros((1,) + scale_shape(H, W, s))
        for k in range(2):
            params[f"omega{k}"] = np.zeros(3)
            params[f"t{k}"] = np.zeros(3)
        fx, fy, cx, cy = intrinsics
        if learn_intrinsics:
            params["raw_fx"] = np.asarray(softplus_inverse(fx))
            params["raw_fy"] = np.asarray(softplus_inverse(fy))
            params["cx"] = np.asarray(float(cx))
            params["cy"] = np.asarray(float(cy))
        sources = [np.asarray(prev, dtype=np.float64), np.asarray(nxt, dtype=np.float64)]
        return cls(target, sources, params, cfg, learn_intrinsics, tuple(intrinsics),
                   with_uncertainty)

    @property
    def shape(self):
        return self.target.shape

    def with_params(self, params):
        return SfmProblem(self.target, self.sources, params, self.cfg, self.learn_intrinsics,
                          self.fixed_intrinsics, self.with_uncertainty, self._ident)

    def identity_errors(self):
        if self._ident is None:
            self._ident = identity_errors(self.target, self.sources, self.cfg)
        return self._ident

    # assembling Vars
    def variables(self):
        return {k: Var(v, requires_grad=True, name=k) for k, v in self.params.items()}

    def intrinsics(self, vs=None):
        if not self.learn_intrinsics:
            return Intrinsics.from_normalized(*self.fixed_intrinsics)
        vs = vs or {k: Var(self.params[k]) for k in ("raw_fx", "raw_fy", "cx", "cy")}
        return Intrinsics(vs["raw_fx"], vs["raw_fy"], vs["cx"], vs["cy"])

    def poses(self, vs=None):
        vs = vs or {k: Var(v) for k, v in self.params.items()}
        return [PoseSE3(vs[f"omega{k}"], vs[f"t{k}"]) for k in range(2)]

    def loss_from(self, vs, stats=None):
        n = self.cfg.n_scales
        disps = [T.sigmoid(vs[f"disp{s}"]) for s in range(n)]
        uncerts = None
        if self.with_uncertainty:
            uncerts = [T.sigmoid(vs[f"uncert{s}"]) for s in range(n)]
        return total_loss(self.target, self.sources, disps, self.intrinsics(vs), self.poses(vs),
                          self.cfg, uncertainties=uncerts, ident_errors=self.identity_errors(),
                          stats=stats)

    def loss_and_grads(self, stats=None):
        vs = self.variables()
        loss = self.loss_from(vs, stats)
        T.backward(loss)
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.value)) for k, v in vs.items()}
        return loss.item(), grads

    # readouts
    def depth(self, scale=0):
        sigma = 0.5 * np.tanh(0.5 * self.params[f"disp{scale}"]) + 0.5
        return disparity_to_depth(Var(sigma), self.cfg.min_depth, self.cfg.max_depth).value

    def uncertainty(self, scale=0):
        if not self.with_uncertainty:
            return None
        return np.clip(0.5 * np.tanh(0.5 * self.params[f"uncert{scale}"]) + 0.5,
                       self.cfg.sigma_min, 1.0)

    def normalized_intrinsics(self):
        return self.intrinsics().normalized()

    def pose_arrays(self):
        return [(self.params[f"omega{k}"].copy(), self.params[f"t{k}"].copy()) for k in range(2)]


@dataclass
class SfmResult:
    depth: np.ndarray  # full resolution (1, H, W)
    depths: list  # per scale, index 0 = full resolution
    poses: list  # [(omega, t)] target-to-source for the previous / next frame
    intrinsics: tuple  # normalized (fx, fy, cx, cy)
    sigma: np.ndarray  # full-resolution uncertainty or None
    trace: list  # (step, lr, loss)
    problem: SfmProblem = field(repr=False, default=None)

    @property
    def final_loss(self):
        return self.trace[-1][2] if self.trace else float("nan")


def _result(problem, trace):
    return SfmResult(
        depth=problem.depth(0),
        depths=[problem.depth(s) for s in range(problem.cfg.n_scales)],
        poses=problem.pose_arrays(),
        intrinsics=problem.normalized_intrinsics(),
        sigma=problem.uncertainty(0),
        trace=list(trace),
        problem=problem,
    )


def optimize(problem, steps, lr_fn=None, frozen=(), callback=None):
    """Minimize the total loss with Adam for ``steps`` iterations.

    ``lr_fn(step, total)`` defaults to :func:`lr_schedule`. Names in
    ``frozen`` keep their initial values. The trace records the loss
    evaluated before each update.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    lr_fn = lr_fn or lr_schedule
    state = AdamState()
    trace = []
    for step in range(steps):
        lr = lr_fn(step, steps)
        loss, grads = problem.loss_and_grads()
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", _result(problem, trace))
        trace.append((step, lr, loss))
        for name in frozen:
            grads.pop(name, None)
        try:
            params, state = adam_step(problem.params, grads, state, lr)
        except DivergenceError as exc:
            raise DivergenceError(str(exc), _result(problem, trace)) from None
        problem = problem.with_params(params)
        if callback is not None:
            callback(step, problem, loss)
    return _result(problem, trace)


# ------------------------------------------------------------------ grad check

def ground_truth_params(problem, sequence, target=1, sources=(0, 2), depth_scale=1.0):
    """Parameters that reproduce a synthetic sequence's ground truth.

    Disparity logits come from inverting the depth map (block-averaged for
    coarser scales), poses are the true target-to-source transforms and the
    intrinsics the true ones. ``depth_scale`` rescales depth and translation
    together, which leaves every warp unchanged.
    """
    from .losses import resize_image
    from .subpixel import depth_to_disparity

    cfg = problem.cfg
    gt = sequence.gt_depths[target] * depth_scale
    _, H, W = problem.shape
    params = dict(problem.params)
    for s in range(cfg.n_scales):
        h, w = scale_shape(H, W, s)
        d = gt if s == 0 else resize_image(gt, h, w)
        sig = depth_to_disparity(d, cfg.min_depth, cfg.max_depth)
        params[f"disp{s}"] = np.log(sig) - np.log1p(-sig)
        if problem.with_uncertainty:
            params[f"uncert{s}"] = np.zeros((1, h, w))
    for k, src in enumerate(sources):
        rel = sequence.relative_pose(target, src)
        params[f"omega{k}"] = rel.omega.value.copy()
        params[f"t{k}"] = rel.t.value * depth_scale
    if problem.learn_intrinsics:
        fx, fy, cx, cy = sequence.K_gt
        params.update(raw_fx=np.asarray(softplus_inverse(fx)), raw_fy=np.asarray(softplus_inverse(fy)),
                      cx=np.asarray(float(cx)), cy=np.asarray(float(cy)))
    return params


def random_problem(W=16, H=12, seed=0, with_uncertainty=True, n_scales=2, noise=0.05):
    """Small rendered three-frame problem with parameters scattered around the truth.

    Every pixel sees real image structure, so each parameter has a gradient
    large enough for a finite-difference comparison.
    """
    from .synth import SyntheticScene, gen_sequence

    rng = np.random.default_rng(seed)
    scene = SyntheticScene(seed=seed, W=W, H=H, geometry=("slanted", "staircase")[seed % 2])
    seq = gen_sequence(scene, 3)
    cfg = LossConfig(n_scales=n_scales)
    prob = SfmProblem.from_frames(*seq.frames, cfg=cfg, seed=seed,
                                  with_uncertainty=with_uncertainty)
    params = ground_truth_params(prob, seq)
    for name, v in params.items():
        params[name] = v + noise * rng.standard_normal(np.shape(v))
    return prob.with_params(params)


def grad_check_problem(problem, h=1e-5, max_entries=None, seed=0):
    """Finite-difference check of the total loss w.r.t. every parameter of ``problem``.

    Masks, per-pixel minima and sampling cells stay as chosen at the base point
    (see :func:`selfsfm.tensor.grad_check`).
    """
    names = list(problem.params)
    problem.identity_errors()  # cached before recording so every evaluation takes the same decisions

    def f(vs):
        return problem.loss_from(dict(zip(names, vs)))

    vs = [Var(problem.params[k], requires_grad=True, name=k) for k in names]
    return T.grad_check(f, vs, h=h, max_entries=max_entries, seed=seed)
