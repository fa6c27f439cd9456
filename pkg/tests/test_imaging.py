import math
from dataclasses import replace

import numpy as np
import pytest

from litho_smo.config import ConfigError, OpticalConfig
from litho_smo.core import ParamField, ParamKind, SourceGrid, source_coords
from litho_smo.imaging import (
    DarkSourceError,
    abbe_aerial,
    build_pupil,
    build_tcc,
    forward_process_window,
    full_spectrum,
    hopkins_aerial,
    resist,
    socs_decompose,
)

from conftest import small_config
from oracles import brute_force_abbe


def make_source(cfg, j):
    fx, fy = source_coords(cfg)
    return SourceGrid(np.asarray(j, dtype=float), fx, fy)


def random_instance(n_mask, n_source, seed, pixel_nm=16.0):
    cfg = small_config(n_mask=n_mask, n_source=n_source, pixel_nm=pixel_nm)
    rng = np.random.default_rng(seed)
    return cfg, make_source(cfg, rng.uniform(0.1, 1.0, (n_source, n_source))), rng.uniform(0, 1, (n_mask, n_mask))


def test_abbe_matches_brute_force_oracle():
    cfg, source, mask = random_instance(16, 3, seed=3, pixel_nm=24.0)
    fast = abbe_aerial(source, mask, build_pupil(cfg), cfg).intensity
    slow = brute_force_abbe(cfg, source.intensities, mask)
    assert np.max(np.abs(fast - slow)) / np.max(np.abs(slow)) < 1e-10


def test_pupil_examples():
    cfg = OpticalConfig()
    pupil = build_pupil(cfg)
    n = cfg.n_mask
    assert pupil.passband[n // 2, n // 2] == 1
    assert pupil.cutoff == pytest.approx(1.35 / 193)
    assert pupil.cutoff == pytest.approx(6.995e-3, abs=1e-6)
    count = 0
    df = 1 / (n * cfg.pixel_nm)
    for ky in range(-n // 2, n // 2):
        for kx in range(-n // 2, n // 2):
            if math.sqrt((ky * df) ** 2 + (kx * df) ** 2) <= cfg.na / cfg.wavelength_nm:
                count += 1
    assert int(pupil.passband.sum()) == count


def test_pupil_below_one_bin_warns():
    cfg = OpticalConfig(n_mask=8, pixel_nm=1.0)
    with pytest.warns(UserWarning):
        build_pupil(cfg)


def test_dark_source():
    cfg = small_config(n_mask=16)
    source = make_source(cfg, np.zeros((3, 3)))
    mask = np.ones((16, 16))
    with pytest.raises(DarkSourceError):
        abbe_aerial(source, mask, build_pupil(cfg), cfg)
    img = abbe_aerial(source, mask, build_pupil(cfg), cfg, threshold=None).intensity
    assert np.all(img == 0)


def test_on_axis_point_clear_mask_gives_unit_image():
    cfg = small_config(n_mask=16)
    j = np.zeros((3, 3))
    j[1, 1] = 1.0
    img = abbe_aerial(make_source(cfg, j), np.ones((16, 16)), build_pupil(cfg), cfg).intensity
    assert np.allclose(img, 1.0, atol=1e-13)


def test_tcc_hermitian_psd_and_trace():
    cfg, source, _ = random_instance(16, 5, seed=1)
    pupil = build_pupil(cfg)
    tcc = build_tcc(source, pupil, cfg)
    e = tcc.entries
    assert np.max(np.abs(e - e.conj().T)) <= 1e-12 * np.max(np.abs(e))
    vals = full_spectrum(tcc)
    assert vals[-1] >= -1e-10 * vals[0]
    # trace oracle: sum over source points of the number of passed bins
    n = cfg.n_mask
    df, cutoff = 1 / (n * cfg.pixel_nm), cfg.na / cfg.wavelength_nm
    ns = cfg.n_source
    axis = np.linspace(-1, 1, ns)
    num = den = 0.0
    for iy in range(ns):
        for ix in range(ns):
            if math.hypot(axis[ix], axis[iy]) > 1 + 1e-12:
                continue
            by, bx = round(axis[iy] * cutoff / df), round(axis[ix] * cutoff / df)
            passed = sum(
                1
                for ky in range(-n // 2, n // 2)
                for kx in range(-n // 2, n // 2)
                if math.hypot((ky + by) * df, (kx + bx) * df) <= cutoff * (1 + 1e-12)
            )
            num += source.intensities[iy, ix] * passed
            den += source.intensities[iy, ix]
    assert np.trace(e).real == pytest.approx(num / den, rel=1e-12)


def test_single_point_tcc_is_rank_one():
    cfg = small_config(n_mask=16)
    j = np.zeros((3, 3))
    j[0, 1] = 1.0
    tcc = build_tcc(make_source(cfg, j), build_pupil(cfg), cfg)
    kernels = socs_decompose(tcc, 1)
    trace = np.trace(tcc.entries).real
    assert kernels.eigenvalues[0] == pytest.approx(trace, rel=1e-12)
    rest = full_spectrum(tcc)[1:]
    assert np.max(np.abs(rest)) < 1e-10 * trace


def test_socs_q_zero_and_clamp():
    cfg, source, mask = random_instance(16, 3, seed=2)
    tcc = build_tcc(source, build_pupil(cfg), cfg)
    k0 = socs_decompose(tcc, 0)
    assert k0.q_used == 0 and len(k0.eigenvalues) == 0
    assert np.all(hopkins_aerial(k0, mask).intensity == 0)
    with pytest.warns(UserWarning):
        big = socs_decompose(tcc, 10_000)
    assert big.q_used == tcc.entries.shape[0]
    with pytest.raises(ConfigError):
        socs_decompose(tcc, -1)


def test_hopkins_full_rank_equals_abbe_and_truncation_monotone():
    cfg, source, mask = random_instance(32, 5, seed=4)
    pupil = build_pupil(cfg)
    abbe = abbe_aerial(source, mask, pupil, cfg).intensity
    tcc = build_tcc(source, pupil, cfg)
    full = socs_decompose(tcc, tcc.entries.shape[0])
    hop = hopkins_aerial(full, mask).intensity
    assert np.max(np.abs(hop - abbe)) / np.max(abbe) < 1e-6
    errs = [np.linalg.norm(hopkins_aerial(full, mask, q).intensity - hop) for q in range(1, full.q_used + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))


def test_energy_capture_against_full_spectrum():
    cfg = OpticalConfig(n_mask=64, n_source=11, pixel_nm=8.0)
    from litho_smo.core import source_template

    source = make_source(cfg, source_template("annular", cfg).astype(float))
    tcc = build_tcc(source, build_pupil(cfg), cfg)
    vals = full_spectrum(tcc)
    kernels = socs_decompose(tcc, 24)
    capture = kernels.eigenvalues.sum() / vals.sum()
    assert capture == pytest.approx(vals[:24].sum() / vals.sum(), rel=1e-12)
    assert 0 < capture <= 1


def test_homogeneity_and_dose_scaling():
    cfg, source, mask = random_instance(32, 3, seed=5)
    pupil = build_pupil(cfg)
    base = abbe_aerial(source, mask, pupil, cfg).intensity
    scaled = abbe_aerial(source, 0.98 * mask, pupil, cfg).intensity
    assert np.max(np.abs(scaled - 0.98 ** 2 * base)) / np.max(base) < 1e-12


def test_source_linearity_before_normalization():
    cfg, source, mask = random_instance(32, 3, seed=6)
    pupil = build_pupil(cfg)
    j = source.intensities
    j1, j2 = j.copy(), j.copy()
    j1[:, 1:] = 0
    j2[:, :1] = 0
    kw = dict(normalize=False, threshold=None)
    total = abbe_aerial(make_source(cfg, j), mask, pupil, cfg, **kw).intensity
    parts = abbe_aerial(make_source(cfg, j1), mask, pupil, cfg, **kw).intensity + abbe_aerial(make_source(cfg, j2), mask, pupil, cfg, **kw).intensity
    assert np.max(np.abs(total - parts)) / np.max(total) < 1e-12


@pytest.mark.parametrize("width", [1, 2, 7, 64])
def test_deterministic_across_widths(width):
    cfg, source, mask = random_instance(32, 5, seed=7)
    pupil = build_pupil(cfg)
    ref = abbe_aerial(source, mask, pupil, replace(cfg, parallel_width=1)).intensity
    out = abbe_aerial(source, mask, pupil, replace(cfg, parallel_width=width)).intensity
    assert np.array_equal(ref, out)
    loose = abbe_aerial(source, mask, pupil, replace(cfg, parallel_width=width, deterministic=False)).intensity
    assert np.max(np.abs(loose - ref)) <= 1e-12 * np.max(ref)


def test_resist_examples():
    cfg = OpticalConfig()
    assert np.all(resist(np.full((4, 4), cfg.resist_threshold), cfg).values == 0.5)
    z = resist(np.full((2, 2), cfg.resist_threshold + 0.1), cfg).values
    assert z[0, 0] == pytest.approx(1 / (1 + math.exp(-3)), abs=1e-15)
    assert z[0, 0] == pytest.approx(0.95257, abs=1e-5)
    dark = resist(np.zeros((3, 3)), cfg).values
    assert np.all(dark == dark[0, 0]) and dark[0, 0] < 0.01


def test_process_window_unit_doses_identical(rng):
    cfg = small_config(n_mask=32, dose_min=1.0, dose_max=1.0)
    tj = ParamField(rng.normal(size=(3, 3)), ParamKind.SOURCE)
    tm = ParamField(rng.normal(size=(32, 32)), ParamKind.MASK)
    pw = forward_process_window(tj, tm, cfg)
    assert np.array_equal(pw.nominal.values, pw.low.values)
    assert np.array_equal(pw.nominal.values, pw.high.values)


def test_process_window_shape_mismatch(rng):
    cfg = small_config(n_mask=32)
    with pytest.raises(ConfigError):
        forward_process_window(ParamField(np.zeros((5, 5)), ParamKind.SOURCE), ParamField(np.zeros((32, 32)), ParamKind.MASK), cfg)


def test_rotation_equivariance():
    cfg, source, mask = random_instance(32, 5, seed=8)
    pupil = build_pupil(cfg)
    img = abbe_aerial(source, mask, pupil, cfg).intensity
    rot_source = make_source(cfg, np.rot90(source.intensities, 2))
    # the periodic grid rotates about pixel 0, hence the roll
    rot_mask = np.roll(np.rot90(mask, 2), 1, axis=(0, 1))
    rot = abbe_aerial(rot_source, rot_mask, pupil, cfg).intensity
    assert np.allclose(np.roll(np.rot90(img, 2), 1, axis=(0, 1)), rot, atol=1e-12)


def test_grid_too_coarse_for_pupil_band():
    cfg = small_config(n_mask=8, pixel_nm=48.0)
    j = np.ones((3, 3))
    with pytest.raises(ConfigError, match="frequency bins"):
        abbe_aerial(make_source(cfg, j), np.ones((8, 8)), build_pupil(cfg), cfg)
