import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from selfsfm import losses as L
from selfsfm import tensor as T
from selfsfm.camera import Intrinsics, PoseSE3
from selfsfm.errors import DimensionError, DomainError
from selfsfm.optim import SfmProblem, ground_truth_params
from selfsfm.synth import SyntheticScene, gen_sequence
from selfsfm.tensor import Var

CFG = L.LossConfig()


def test_config_validation():
    assert CFG.scale_factors == [1 / 8, 1 / 4, 1 / 2, 1]
    assert CFG.smooth_weight_at(2) == pytest.approx(CFG.smooth_weight / 4)
    assert L.LossConfig(smooth_scale_decay=False).smooth_weight_at(3) == CFG.smooth_weight
    for bad in ({"alpha": 1.5}, {"sigma_min": 0.0}, {"n_scales": 0}):
        with pytest.raises(ValueError):
            L.LossConfig(**bad)


# ------------------------------------------------------------------------ SSIM

def test_ssim_identical_is_one(rng):
    x = rng.random((3, 6, 7))
    np.testing.assert_allclose(L.ssim(x, x).value, 1.0, atol=1e-12)


def test_ssim_constant_images_closed_form():
    s = L.ssim(np.zeros((1, 5, 5)), np.ones((1, 5, 5)), L.LossConfig(ssim_c1=1e-4)).value
    np.testing.assert_allclose(s, 1e-4 / (1 + 1e-4), rtol=1e-12)


def test_ssim_small_noise(rng):
    x = rng.random((3, 8, 8))
    m = L.ssim(x, np.clip(x + 0.01 * rng.standard_normal(x.shape), 0, 1)).value.mean()
    assert 0.9 < m < 1.0


def test_ssim_range(rng):
    s = L.ssim(rng.random((3, 8, 8)), rng.random((3, 8, 8))).value
    assert s.min() >= -1.0 and s.max() <= 1.0


def test_ssim_gradient(rng):
    x = Var(rng.random((1, 8, 8)), requires_grad=True)
    y = Var(rng.random((1, 8, 8)), requires_grad=True)
    rep = T.grad_check(lambda p: T.mean(L.ssim(p[0], p[1])), [x, y])
    assert rep.max_relative_error < 1e-4


# ----------------------------------------------------------------- photometric

def test_photometric_examples(rng):
    x = rng.random((3, 6, 6))
    assert np.all(L.photometric_error(x, x).value == 0.0)
    e = L.photometric_error(np.zeros((3, 5, 5)), np.ones((3, 5, 5)), L.LossConfig(ssim_c1=1e-4)).value
    np.testing.assert_allclose(e, 0.85 * (1 - 1e-4 / (1 + 1e-4)) / 2 + 0.15, rtol=1e-12)
    assert e.flat[0] == pytest.approx(0.57496, abs=1e-5)
    y = rng.random((3, 6, 6))
    l1 = L.photometric_error(x, y, L.LossConfig(alpha=0.0)).value
    np.testing.assert_allclose(l1, np.abs(x - y).mean(axis=0, keepdims=True), atol=1e-15)
    assert l1.shape == (1, 6, 6)


@given(st.integers(0, 1000))
def test_photometric_nonnegative(seed):
    r = np.random.default_rng(seed)
    assert L.photometric_error(r.random((3, 5, 6)), r.random((3, 5, 6))).value.min() >= 0.0


def test_photometric_gradient(rng):
    t = rng.random((3, 6, 7))
    y = Var(rng.random((3, 6, 7)), requires_grad=True)
    rep = T.grad_check(lambda p: T.sum(L.photometric_error(T.const(t), p[0])), [y])
    assert rep.max_relative_error < 1e-4


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        L.photometric_error(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


# ------------------------------------------------- min, uncertainty, auto-mask

def test_min_reprojection(rng):
    assert L.min_reprojection([Var([[0.3]]), Var([[0.1]])]).value.tolist() == [[0.1]]
    one = Var(rng.random((1, 3, 3)))
    assert np.array_equal(L.min_reprojection([one]).value, one.value)
    maps = [rng.random((1, 4, 5)) for _ in range(3)]
    out = L.min_reprojection([Var(m) for m in maps]).value
    for idx in np.ndindex(out.shape):
        assert out[idx] == min(m[idx] for m in maps)
    with pytest.raises(DomainError):
        L.min_reprojection([])


def test_uncertainty_weighted_examples():
    e = Var(np.full((1, 2, 2), 0.2))
    assert np.all(L.uncertainty_weighted(e, None).value == 0.2 / 2 + 1.5)
    assert np.all(L.uncertainty_weighted(e, Var(np.ones((1, 2, 2)))).value == 0.2 / 2 + 1.5)
    v = L.uncertainty_weighted(e, Var(np.full((1, 2, 2), 0.5))).value
    np.testing.assert_allclose(v, 0.4 + 0.5 * np.log(0.5) + 1.5, rtol=1e-15)
    assert v.flat[0] == pytest.approx(1.55343, abs=1e-5)


def test_zero_residual_prefers_smallest_sigma():
    sig = np.linspace(0.0, 1.0, 101)[:, None, None]
    vals = L.uncertainty_weighted(Var(np.zeros((101, 1, 1))), Var(sig)).value.ravel()
    assert np.argmin(vals) <= 1  # sigma 0 and 0.01 both clamp to sigma_min
    assert vals[0] == vals[1] == vals.min()


def test_uncertainty_gradient(rng):
    e = Var(rng.uniform(0.05, 0.5, (1, 4, 4)), requires_grad=True)
    s = Var(rng.uniform(0.2, 0.9, (1, 4, 4)), requires_grad=True)
    assert T.grad_check(lambda p: T.sum(L.uncertainty_weighted(p[0], p[1])), [e, s]).max_relative_error < 1e-4


def test_auto_mask_cases(rng):
    t = rng.random((3, 5, 5))
    assert np.all(L.auto_mask(t, [t], [t]).value == 0.0)
    m = L.auto_mask_from_errors([np.array([[[0.3]]])], [np.array([[[0.1]]])])
    assert m.value.item() == 1.0
    s, w = rng.random((3, 5, 5)), rng.random((3, 5, 5))
    a = L.auto_mask(t, [s], [w]).value
    assert set(np.unique(a)) <= {0.0, 1.0}
    np.testing.assert_array_equal(a, L.auto_mask(t, [s, s], [w, w]).value)
    assert not L.auto_mask(t, [s], [w]).requires_grad
    with pytest.raises(DomainError):
        L.auto_mask(t, [], [])
    with pytest.raises(DimensionError):
        L.auto_mask(t, [s], [w, w])


def test_auto_mask_small_on_true_motion():
    seq = gen_sequence(SyntheticScene(seed=2, W=64, H=48), 3)
    from selfsfm.camera import synthesize_view, warp_grid

    intr = seq.scene.intrinsics()
    warped = []
    for src in (0, 2):
        grid, _ = warp_grid(Var(seq.gt_depths[1]), intr, seq.relative_pose(1, src), 64, 48)
        warped.append(synthesize_view(Var(seq.frames[src]), grid).value)
    mu = L.auto_mask(seq.frames[1], [seq.frames[0], seq.frames[2]], warped).value
    assert 1.0 - mu.mean() < 0.05


# ------------------------------------------------------------------ smoothness

def test_smoothness_constant_disparity(rng):
    assert L.smoothness(Var(np.full((1, 6, 7), 0.3)), rng.random((3, 6, 7))).item() == 0.0


def test_smoothness_ramp():
    ramp = 1.0 + 0.05 * np.arange(8.0)
    d = np.tile(ramp, (1, 6, 1))
    s = 0.05 / ramp.mean()
    assert L.smoothness(Var(d), np.zeros((3, 6, 8))).item() == pytest.approx(s, rel=1e-12)


@given(st.floats(0.01, 100.0), st.integers(0, 500))
def test_smoothness_scale_invariant(c, seed):
    r = np.random.default_rng(seed)
    d, img = r.uniform(0.1, 1.0, (1, 6, 7)), r.random((3, 6, 7))
    a = L.smoothness(Var(d), img).item()
    assert abs(L.smoothness(Var(c * d), img).item() - a) < 1e-10


def test_smoothness_gradient_and_errors(rng):
    d = Var(rng.uniform(0.1, 1.0, (1, 6, 7)), requires_grad=True)
    img = rng.random((3, 6, 7))
    assert T.grad_check(lambda p: L.smoothness(p[0], img), [d]).max_relative_error < 1e-4
    with pytest.raises(DomainError):
        L.smoothness(Var(np.zeros((1, 4, 4))), np.zeros((3, 4, 4)))
    with pytest.raises(DimensionError):
        L.smoothness(Var(np.ones((1, 4, 4))), np.zeros((3, 4, 5)))


def test_resizing():
    x = np.arange(16.0).reshape(1, 4, 4)
    np.testing.assert_allclose(L.resize_image(x, 2, 2), [[[2.5, 4.5], [10.5, 12.5]]])
    up = L.upsample_bilinear(Var(np.full((1, 2, 3), 0.7)), 8, 12).value
    np.testing.assert_allclose(up, 0.7, atol=1e-15)
    assert L.scale_shape(96, 128, 3) == (12, 16)


# ---------------------------------------------------------------- total loss

def _gt_problem(with_uncertainty=False, n_scales=4, smooth_weight=0.0):
    seq = gen_sequence(SyntheticScene(seed=0, W=64, H=48), 3)
    cfg = L.LossConfig(smooth_weight=smooth_weight, n_scales=n_scales)
    prob = SfmProblem.from_frames(*seq.frames, cfg=cfg, with_uncertainty=with_uncertainty)
    return prob.with_params(ground_truth_params(prob, seq)), seq


def test_total_loss_at_ground_truth():
    prob, _ = _gt_problem()
    loss = prob.loss_and_grads()[0]
    assert 1.5 <= loss <= 1.51


def test_total_loss_static_frames_is_offset(rng):
    img = rng.random((3, 8, 10))
    cfg = L.LossConfig(n_scales=1, smooth_weight=0.0)
    loss = L.total_loss(img, [img], [Var(np.full((1, 8, 10), 0.3))],
                        Intrinsics.from_normalized(0.5, 0.5, 0.5, 0.5), [PoseSE3.identity()], cfg)
    assert loss.item() == 1.5


def test_total_loss_errors(rng):
    img = rng.random((3, 8, 8))
    intr = Intrinsics.from_normalized(0.5, 0.5, 0.5, 0.5)
    with pytest.raises(DimensionError):
        L.total_loss(img, [img], [Var(np.ones((1, 8, 8)))], intr, [], L.LossConfig(n_scales=1))
    with pytest.raises(DimensionError):
        L.total_loss(img, [img], [Var(np.ones((1, 8, 8)))], intr, [PoseSE3.identity()],
                     L.LossConfig(n_scales=2))


def test_total_loss_stats():
    prob, _ = _gt_problem(smooth_weight=1e-3)
    stats = {}
    prob.loss_and_grads(stats)
    assert len(stats["mask_fraction"]) == 4
    assert all(f > 0.9 for f in stats["mask_fraction"])
    assert all(s > 0 for s in stats["smoothness"])
