import math

import numpy as np
import pytest
from scipy.special import expit

from litho_smo.config import ConfigError, OpticalConfig
from litho_smo.core import ParamField, ParamKind, TargetPattern, init_source_params
from litho_smo.imaging import forward_process_window
from litho_smo.lossgrad import (
    SmoObjective,
    central_difference,
    finite_difference_grad,
    grad_smo,
    hvp_so_jj,
    jvp_so_mj,
    loss_l2,
    loss_pvb,
    loss_smo,
    relative_error,
)
from litho_smo.optimizers import QuadraticBilevel

from conftest import random_target, small_config


def instance(n_mask=32, n_source=3, seed=0, pixel_nm=16.0, **kw):
    cfg = small_config(n_mask=n_mask, n_source=n_source, pixel_nm=pixel_nm, **kw)
    rng = np.random.default_rng(seed)
    target = TargetPattern(random_target(n_mask, seed), pixel_nm)
    return cfg, target, rng.normal(size=(n_source, n_source)), rng.normal(scale=0.5, size=(n_mask, n_mask))


def test_loss_l2_examples(rng):
    t = np.zeros((4, 4))
    assert loss_l2(t, t) == 0.0
    assert loss_l2(np.ones((4, 4)), t) == 16.0
    z = rng.random((8, 8))
    tt = (rng.random((8, 8)) > 0.5).astype(int)
    acc = 0.0
    for i in range(8):
        for k in range(8):
            acc += (z[i, k] - tt[i, k]) ** 2
    assert loss_l2(z, tt) == pytest.approx(acc, rel=1e-12)
    with pytest.raises(ConfigError):
        loss_l2(np.zeros((3, 3)), t)


def test_loss_pvb_examples(rng):
    t = (rng.random((6, 6)) > 0.5).astype(float)
    assert loss_pvb(t, t, t) == 0.0
    off = t.copy()
    off[0, :3] = 1 - off[0, :3]
    assert loss_pvb(t, off, t) == 3.0
    a, b = rng.random((6, 6)), rng.random((6, 6))
    assert loss_pvb(a, b, t) == pytest.approx(loss_l2(a, t) + loss_l2(b, t), rel=1e-15)


def test_loss_smo_weights_and_consistency():
    cfg, target, tj, tm = instance(gamma=0.0, eta=0.0)
    assert loss_smo(tj, tm, cfg, target).total == 0.0
    cfg, target, tj, tm = instance()
    assert (cfg.gamma, cfg.eta) == (1000.0, 3000.0)
    val = loss_smo(tj, tm, cfg, target)
    assert val.total == pytest.approx(cfg.gamma * val.l2_term + cfg.eta * val.pvb_term, rel=1e-12)
    # recompute from the forward model
    pw = forward_process_window(ParamField(tj, ParamKind.SOURCE), ParamField(tm, ParamKind.MASK), cfg)
    assert val.l2_term == pytest.approx(loss_l2(pw.nominal, target), rel=1e-12)
    assert val.pvb_term == pytest.approx(loss_pvb(pw.low, pw.high, target), rel=1e-12)
    assert min(val.total, val.l2_term, val.pvb_term) >= 0


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradients_match_finite_differences(seed):
    cfg, target, tj, tm = instance(seed=seed)
    obj = SmoObjective(cfg, target)
    g = obj.grad(tj, tm)
    fd_j = finite_difference_grad(lambda x: obj.loss(x, tm).total, tj, 1e-4)
    idx = np.random.default_rng(seed).choice(tm.size, 60, replace=False)
    fd_m = finite_difference_grad(lambda y: obj.loss(tj, y).total, tm, 1e-4, idx)
    assert relative_error(g.wrt_source, fd_j) < 1e-4
    assert relative_error(g.wrt_mask, fd_m) < 1e-4


def test_gradient_zero_at_perfect_print():
    # a binary mask, steep sigmoids and unit doses make Z match the target to
    # machine precision wherever it matters; check the gradient vanishes there
    cfg = small_config(n_mask=16, dose_min=1.0, dose_max=1.0)
    target = TargetPattern(np.zeros((16, 16)), cfg.pixel_nm)
    obj = SmoObjective(cfg, target)
    tj = np.full((3, 3), 5.0)
    tm = np.full((16, 16), -200.0)
    # all-dark mask: Z = sigmoid(-beta*I_tr) everywhere, the loss is stationary in theta_M
    g = obj.grad(tj, tm)
    assert np.all(g.wrt_mask == 0)
    assert np.max(np.abs(g.wrt_source)) < 1e-12


def test_uniform_dark_target_gradient_closed_form():
    # empty target and uniform mask: the image is c*m^2 everywhere, with c the
    # source fraction whose shifted pupil still passes DC, so every mask pixel
    # carries 1/N^2 of the derivative of the uniform-mask loss
    cfg = small_config(n_mask=32)
    n = cfg.n_mask
    cb = cfg.na / cfg.wavelength_nm * n * cfg.pixel_nm
    axis = np.linspace(-1, 1, 3)
    passed = total = 0
    for sy in axis:
        for sx in axis:
            if math.hypot(sx, sy) <= 1:
                total += 1
                passed += math.hypot(round(sx * cb), round(sy * cb)) <= cb
    c = passed / total
    obj = SmoObjective(cfg, np.zeros((n, n)))
    tj = np.full((3, 3), cfg.j0)
    tm = np.full((n, n), -cfg.m0)
    g = obj.grad(tj, tm).wrt_mask
    m = expit(-cfg.alpha_m * cfg.m0)
    beta, it = cfg.resist_steepness, cfg.resist_threshold

    def per_pixel(mm):
        return sum(
            w * expit(beta * (c * d * d * mm * mm - it)) ** 2
            for d, w in ((1.0, cfg.gamma), (cfg.dose_min, cfg.eta), (cfg.dose_max, cfg.eta))
        )

    h = 1e-7
    dldm = (per_pixel(m + h) - per_pixel(m - h)) / (2 * h)
    expected = dldm * cfg.alpha_m * m * (1 - m)
    assert np.allclose(g, expected, rtol=1e-6)
    assert np.ptp(g) <= 1e-12 * abs(expected)


def test_far_corner_gradient_is_negligible():
    # large tile, one central contact: corners sit ~10 PSF widths away
    cfg = OpticalConfig(n_mask=128, pixel_nm=16.0)
    t = np.zeros((128, 128))
    t[62:66, 62:66] = 1
    obj = SmoObjective(cfg, TargetPattern(t, 16.0))
    tj = init_source_params("annular", cfg).values
    tm = np.where(t > 0, cfg.m0, -cfg.m0)
    g = np.abs(obj.grad(tj, tm).wrt_mask)
    corners = [g[0, 0], g[0, -1], g[-1, 0], g[-1, -1]]
    assert max(corners) < 1e-4 * g.max()


def test_hvp_zero_and_symmetry():
    cfg, target, tj, tm = instance(n_mask=16, seed=3)
    assert np.all(hvp_so_jj(tj, tm, np.zeros_like(tj), cfg, target) == 0)
    assert np.all(jvp_so_mj(tj, tm, np.zeros_like(tj), cfg, target) == 0)
    rng = np.random.default_rng(9)
    u, v = rng.normal(size=tj.shape), rng.normal(size=tj.shape)
    hu = hvp_so_jj(tj, tm, u, cfg, target, eps=1e-4)
    hv = hvp_so_jj(tj, tm, v, cfg, target, eps=1e-4)
    a, b = np.sum(u * hv), np.sum(v * hu)
    assert abs(a - b) <= 1e-5 * max(abs(a), abs(b))


def test_hvp_bilinearity():
    cfg, target, tj, tm = instance(n_mask=16, seed=4)
    rng = np.random.default_rng(10)
    u, v = rng.normal(size=tj.shape), rng.normal(size=tj.shape)
    combo = hvp_so_jj(tj, tm, 2.0 * u - 0.5 * v, cfg, target, eps=1e-4)
    parts = 2.0 * hvp_so_jj(tj, tm, u, cfg, target, eps=1e-4) - 0.5 * hvp_so_jj(tj, tm, v, cfg, target, eps=1e-4)
    assert relative_error(combo, parts) < 1e-4


def test_hvp_on_quadratic():
    q = QuadraticBilevel.random(6, 4, seed=0)
    rng = np.random.default_rng(0)
    x, y, v = rng.normal(size=6), rng.normal(size=4), rng.normal(size=6)
    assert np.allclose(q.hvp_lower(x, y, v, 1e-2), q.A @ v, atol=1e-8)


def test_jvp_on_bilinear():
    rng = np.random.default_rng(1)
    B = rng.normal(size=(5, 7))
    w = rng.normal(size=5)
    # L = x'By: the mixed term applied to w is B'w, independent of x
    out = central_difference(lambda x: B.T @ x, rng.normal(size=5), w, 1e-2)
    assert np.allclose(out, B.T @ w, atol=1e-8)


def test_jvp_matches_dense_mixed_hessian():
    cfg, target, tj, tm = instance(n_mask=8, pixel_nm=32.0, seed=5)
    obj = SmoObjective(cfg, target)
    w = np.random.default_rng(11).normal(size=tj.shape)
    got = obj.jvp_mj(tj, tm, w, 1e-4)
    # column by column: d/d theta_J[k] of the mask gradient
    h = 1e-5
    dense = np.zeros((tj.size, tm.size))
    for k in range(tj.size):
        e = np.zeros(tj.size)
        e[k] = h
        e = e.reshape(tj.shape)
        dense[k] = ((obj.grad_mask(tj + e, tm) - obj.grad_mask(tj - e, tm)) / (2 * h)).ravel()
    assert relative_error(got.ravel(), w.ravel() @ dense) < 1e-3


def test_loss_rotation_invariance():
    cfg, target, tj, tm = instance(seed=6)
    obj = SmoObjective(cfg, target)
    base = obj.loss(tj, tm).total
    rolled = lambda a: np.roll(np.rot90(a, 2), 1, axis=(0, 1))
    rot_t = TargetPattern(rolled(target.pixels), cfg.pixel_nm)
    rot = SmoObjective(cfg, rot_t).loss(np.rot90(tj, 2), rolled(tm)).total
    assert rot == pytest.approx(base, rel=1e-12)


def test_shape_and_finite_checks():
    cfg, target, tj, tm = instance(n_mask=16)
    obj = SmoObjective(cfg, target)
    with pytest.raises(ConfigError):
        obj.loss(np.zeros((5, 5)), tm)
    bad = tm.copy()
    bad[0, 0] = np.inf
    with pytest.raises(FloatingPointError):
        obj.loss(tj, bad)
    with pytest.raises(ConfigError):
        central_difference(lambda x: x, tj, tj, 0.0)


def test_fd_step_scaling():
    calls = []
    central_difference(lambda x: calls.append(x.copy()) or x, np.zeros(3), np.array([0.0, 4.0, -2.0]), 1e-2)
    assert np.max(np.abs(calls[0])) == pytest.approx(1e-2)
