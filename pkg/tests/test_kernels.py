"""Compiled and numpy backends must agree; the fused photometric path must match the composed one."""

import numpy as np
import pytest

from selfsfm import _pykernels, kernels, losses
from selfsfm import tensor as T
from selfsfm.tensor import Var

needs_compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                                    reason="compiled extension not built")


@pytest.fixture
def python_backend():
    prev = kernels.use_backend("python")
    yield
    kernels.use_backend(prev)


def test_backend_switch_round_trip():
    prev = kernels.use_backend("python")
    assert kernels.backend_name() == "python"
    kernels.use_backend(prev)
    assert kernels.backend_name() == prev
    with pytest.raises(ValueError):
        kernels.use_backend("gpu")


@needs_compiled
@pytest.mark.parametrize("stride,groups", [(1, 1), (2, 1), (1, 2)])
def test_conv_backends_agree(stride, groups, rng):
    from selfsfm import _ckernels

    x = rng.standard_normal((4, 9, 8))
    w = rng.standard_normal((6, 4 // groups, 3, 3))
    a = _ckernels.conv2d_forward(x, w, stride, groups)
    b = _pykernels.conv2d_forward(x, w, stride, groups)
    np.testing.assert_allclose(a, b, atol=1e-12)
    g = rng.standard_normal(a.shape)
    for u, v in zip(_ckernels.conv2d_backward(x, w, g, stride, groups),
                    _pykernels.conv2d_backward(x, w, g, stride, groups)):
        np.testing.assert_allclose(u, v, atol=1e-11)


@needs_compiled
def test_bilinear_backends_agree(rng):
    from selfsfm import _ckernels

    src = rng.random((3, 7, 9))
    gx = rng.uniform(-2, 10, (5, 6))
    gy = rng.uniform(-2, 8, (5, 6))
    gx[0, :3] = [0.0, 8.0, 3.0]  # exact borders and an integer coordinate
    np.testing.assert_allclose(_ckernels.bilinear_forward(src, gx, gy),
                               _pykernels.bilinear_forward(src, gx, gy), atol=1e-14)
    g = rng.standard_normal((3, 5, 6))
    for u, v in zip(_ckernels.bilinear_backward(src, gx, gy, g),
                    _pykernels.bilinear_backward(src, gx, gy, g)):
        np.testing.assert_allclose(u, v, atol=1e-13)


@needs_compiled
def test_box_filter_backends_agree(rng):
    from selfsfm import _ckernels

    x = rng.random((3, 6, 5))
    np.testing.assert_allclose(_ckernels.box3_reflect(x), _pykernels.box3_reflect(x), atol=1e-15)
    np.testing.assert_allclose(_ckernels.box3_reflect_adjoint(x),
                               _pykernels.box3_reflect_adjoint(x), atol=1e-15)


@pytest.mark.parametrize("backend", kernels.available_backends())
def test_box_filter_matches_reflect_conv_and_is_adjoint(backend, rng):
    prev = kernels.use_backend(backend)
    try:
        x = rng.random((2, 6, 7))
        g = rng.random((2, 6, 7))
        ref = losses.box3(Var(x)).value
        np.testing.assert_allclose(kernels.box3_reflect(x), ref, atol=1e-14)
        lhs = np.sum(kernels.box3_reflect(x) * g)
        rhs = np.sum(x * kernels.box3_reflect_adjoint(g))
        assert lhs == pytest.approx(rhs, rel=1e-13)
    finally:
        kernels.use_backend(prev)


def _composed_photometric(target, image, cfg):
    s = losses.ssim(T.const(target), image, cfg)
    l1 = T.mean(T.abs(T.const(target) - image), axis=0, keepdims=True)
    return cfg.alpha * T.mean((1.0 - s) / 2.0, axis=0, keepdims=True) + (1 - cfg.alpha) * l1


def test_fused_photometric_matches_composed(rng):
    cfg = losses.LossConfig()
    t = rng.random((3, 8, 9))
    y = Var(rng.random((3, 8, 9)), requires_grad=True)
    fused = losses.photometric_error(T.const(t), y, cfg)
    comp = _composed_photometric(t, y, cfg)
    np.testing.assert_allclose(fused.value, comp.value, atol=1e-14)
    w = rng.random(fused.shape)
    T.backward(T.sum(fused * Var(w)))
    g_fused = y.grad.copy()
    y2 = Var(y.value, requires_grad=True)
    T.backward(T.sum(_composed_photometric(t, y2, cfg) * Var(w)))
    np.testing.assert_allclose(g_fused, y2.grad, atol=1e-13)


def test_full_loss_same_on_both_backends(python_backend):
    from selfsfm.optim import random_problem

    prob = random_problem(seed=3)
    loss_py, grads_py = prob.loss_and_grads()
    if "compiled" not in kernels.available_backends():
        pytest.skip("compiled extension not built")
    kernels.use_backend("compiled")
    loss_c, grads_c = prob.loss_and_grads()
    assert loss_c == pytest.approx(loss_py, abs=1e-12)
    for k in grads_py:
        np.testing.assert_allclose(grads_c[k], grads_py[k], atol=1e-11)
