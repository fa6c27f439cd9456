"""Forward imaging: pupil, Abbe source-point summation, TCC/SOCS and resist.

Frequency arrays handed to the FFT live in numpy's natural (unshifted)
order. ``Pupil.passband`` is stored centred (DC in the middle) for
inspection; everything else uses :func:`freq_index` to get signed bin
indices in natural order.

Source points whose rounded frequency shifts coincide produce identical
coherent fields, so the Abbe sum is evaluated once per distinct shift with
the summed intensity of its members as weight. That is exact, not an
approximation, once shifts are snapped to frequency bins.
"""

from __future__ import annotations

import functools
import os
import warnings
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .config import ConfigError, OpticalConfig
from .core import (
    MaskGrid,
    ParamField,
    SourceGrid,
    activate_mask,
    activate_source,
    sigmoid,
)


class DarkSourceError(ValueError):
    """No source point is bright enough to form an image."""


# sentinel: take the activity threshold from the config
FROM_CONFIG = float("nan")


@dataclass(frozen=True)
class Pupil:
    passband: np.ndarray  # centred, uint8
    cutoff: float
    freq_step: float

    @property
    def n(self) -> int:
        return self.passband.shape[0]

    @property
    def cutoff_bins(self) -> float:
        return self.cutoff / self.freq_step


@dataclass(frozen=True)
class AerialImage:
    intensity: np.ndarray


@dataclass(frozen=True)
class ResistImage:
    values: np.ndarray


@dataclass(frozen=True)
class TccMatrix:
    entries: np.ndarray  # complex (B, B)
    band_index: np.ndarray  # (B, 2) signed (ky, kx) bins
    n: int


@dataclass(frozen=True)
class SocsKernels:
    eigenvalues: np.ndarray
    kernels: np.ndarray  # spatial, complex (Q, N, N)
    spectra: np.ndarray  # fft2 of kernels, natural order
    q_used: int
    band_radius: int = 0


def freq_index(n: int) -> np.ndarray:
    """Signed integer frequency bins in natural FFT order."""
    return np.rint(np.fft.fftfreq(n) * n).astype(int)


def build_pupil(cfg: OpticalConfig) -> Pupil:
    n = cfg.n_mask
    k = np.arange(n) - n // 2
    ky, kx = np.meshgrid(k, k, indexing="ij")
    df = cfg.freq_step
    radius = np.hypot(kx * df, ky * df)
    passband = (radius <= cfg.cutoff * (1 + 1e-12)).astype(np.uint8)
    if cfg.cutoff < df:
        warnings.warn(
            f"pupil cutoff {cfg.cutoff:.3g}/nm is below one frequency bin {df:.3g}/nm; image is DC-only",
            stacklevel=2,
        )
    return Pupil(passband, cfg.cutoff, df)


@functools.lru_cache(maxsize=1024)
def _shifted_pupil(n: int, cutoff_bins: float, sy: int, sx: int) -> np.ndarray:
    """H(f_sigma + f') on the natural-order grid, evaluated without wrap-around."""
    k = freq_index(n)
    ky = (k + sy)[:, None]
    kx = (k + sx)[None, :]
    out = (ky * ky + kx * kx) <= cutoff_bins * cutoff_bins * (1 + 1e-12)
    out.setflags(write=False)
    return out


def source_shifts(source: SourceGrid, pupil: Pupil) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel frequency shift in bins, (sy, sx), rounded to the mask grid."""
    scale = pupil.cutoff_bins
    return np.rint(source.fy * scale).astype(int), np.rint(source.fx * scale).astype(int)


@dataclass(frozen=True)
class SourcePlan:
    """Effective source points grouped by their rounded frequency shift.

    ``group_of`` maps each source pixel to its group, or -1 when the pixel is
    dark, outside the unit sigma disk, or below the activity threshold.
    """

    shifts: np.ndarray  # (G, 2) as (sy, sx)
    weights: np.ndarray  # (G,)
    group_of: np.ndarray  # (n_source, n_source) int
    total: float
    n_active: int

    @property
    def n_groups(self) -> int:
        return len(self.weights)

    def chunks(self, chunk_size: int) -> list[np.ndarray]:
        return [np.arange(s, min(s + chunk_size, self.n_groups)) for s in range(0, self.n_groups, chunk_size)]


def plan_source(source: SourceGrid, pupil: Pupil, threshold: float | None) -> SourcePlan:
    j = np.asarray(source.intensities, dtype=float)
    inside = source.radius <= 1.0 + 1e-12
    active = inside & (j > threshold) if threshold is not None else inside.copy()
    sy, sx = source_shifts(source, pupil)
    group_of = np.full(j.shape, -1, dtype=int)
    flat = np.flatnonzero(active.ravel())
    span = 2 * int(np.abs(np.concatenate([sy.ravel(), sx.ravel()])).max()) + 1
    codes = sy.ravel()[flat] * span + sx.ravel()[flat]
    # groups are numbered by first appearance in row-major order, which fixes
    # the reduction order
    uniq, first, inverse = np.unique(codes, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=int)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    group_of.ravel()[flat] = rank[inverse]
    weights = np.zeros(len(uniq))
    np.add.at(weights, group_of[active], j[active])
    order = np.argsort(rank, kind="stable")
    lead = flat[first[order]]
    shifts = np.stack([sy.ravel()[lead], sx.ravel()[lead]], axis=1).reshape(-1, 2).astype(int)
    return SourcePlan(shifts, weights, group_of, float(weights.sum()), int(active.sum()))


_POOLS: dict[int, ThreadPoolExecutor] = {}


def _pool(width: int) -> ThreadPoolExecutor | None:
    workers = min(width, os.cpu_count() or 1)
    if workers <= 1:
        return None
    if workers not in _POOLS:
        _POOLS[workers] = ThreadPoolExecutor(max_workers=workers, thread_name_prefix="abbe")
    return _POOLS[workers]


def _run_chunks(fn, chunks: list, width: int, deterministic: bool) -> list:
    """Evaluate ``fn`` on every chunk with at most ``width`` in flight.

    Results come back in chunk order when deterministic, else in completion
    order.
    """
    pool = _pool(width) if len(chunks) > 1 else None
    if pool is None:
        return [fn(c) for c in chunks]
    futures = [pool.submit(fn, c) for c in chunks]
    if deterministic:
        return [f.result() for f in futures]
    return [f.result() for f in as_completed(futures)]


@dataclass(frozen=True)
class BandBasis:
    """Pruned inverse DFT over a square box of frequency bins.

    Every shifted pupil is supported inside ``[-R, R]^2``, so the coherent
    field is ``ey @ S_box @ ey.T`` with ``ey[y, b] = exp(2j*pi*k_b*y/N)/N``.
    This is ``ifft2`` restricted to the nonzero band.
    """

    idx: np.ndarray  # natural-order indices of the box bins
    ey: np.ndarray  # (N, B)

    @property
    def n(self) -> int:
        return self.ey.shape[0]

    def synth(self, box: np.ndarray) -> np.ndarray:
        return np.matmul(self.ey, np.matmul(box, self.ey.T))

    def analyze(self, u: np.ndarray) -> np.ndarray:
        """fft2 of ``u`` sampled on the box."""
        n = self.n
        return (n * n) * np.matmul(self.ey.conj().T, np.matmul(u, self.ey.conj()))

    def take(self, full: np.ndarray) -> np.ndarray:
        return full[np.ix_(self.idx, self.idx)]


@functools.lru_cache(maxsize=64)
def band_basis(n: int, radius: int) -> BandBasis:
    k = freq_index(n)
    idx = np.flatnonzero(np.abs(k) <= radius)
    idx = idx[np.argsort(k[idx], kind="stable")]
    y = np.arange(n)
    ey = np.exp(2j * np.pi * np.outer(y, k[idx]) / n) / n
    ey.setflags(write=False)
    idx.setflags(write=False)
    return BandBasis(idx, ey)


def pupil_basis(pupil: Pupil) -> BandBasis:
    """Box covering every shifted pupil a unit-disk source can produce."""
    cb = pupil.cutoff_bins * (1 + 1e-12)
    radius = int(np.rint(pupil.cutoff_bins)) + int(np.floor(cb))
    if 2 * radius + 1 > pupil.n:
        raise ConfigError(
            f"shifted pupils span {2 * radius + 1} frequency bins but the grid has {pupil.n}; "
            "use a larger n_mask or a smaller pixel_nm"
        )
    return band_basis(pupil.n, radius)


def mirror_key(shift) -> tuple[tuple[int, int], bool]:
    """Representative of the pair {s, -s} and whether ``shift`` is its mirror."""
    sy, sx = int(shift[0]), int(shift[1])
    if sy > 0 or (sy == 0 and sx >= 0):
        return (sy, sx), False
    return (-sy, -sx), True


class MaskFields:
    """Coherent fields A_s of one mask, computed lazily per source shift.

    The fields depend on the mask and the shift only, so every source
    weighting of the same mask reuses them. For a real mask and a symmetric
    pupil ``A_{-s} = conj(A_s)``, so only one shift of each mirror pair is
    synthesized.
    """

    def __init__(self, mask: np.ndarray, pupil: Pupil, cfg: OpticalConfig):
        m = np.asarray(mask, dtype=float)
        if m.shape != pupil.passband.shape:
            raise ConfigError(f"mask shape {m.shape} does not match pupil {pupil.passband.shape}")
        self.mask = m
        self.pupil = pupil
        self.cfg = cfg
        self.basis = pupil_basis(pupil)
        self.basis_radius = (len(self.basis.idx) - 1) // 2
        self.sub_radius = int(np.floor(pupil.cutoff_bins * (1 + 1e-12)))
        self.spectrum = self.basis.take(sfft.fft2(m))
        self._fields: dict[tuple[int, int], np.ndarray] = {}
        self._power: dict[tuple[int, int], np.ndarray] = {}

    def window(self, shifts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-shift sub-box of the band covering that shifted pupil.

        Returns box-coordinate row/column indices (G, w) and the pupil
        samples on each sub-box (G, w, w).
        """
        shifts = np.asarray(shifts, dtype=int).reshape(-1, 2)
        r, big = self.sub_radius, self.basis_radius
        offs = np.arange(-r, r + 1)
        rows = big - shifts[:, 0:1] + offs  # k = -sy + offs
        cols = big - shifts[:, 1:2] + offs
        ky = rows - big + shifts[:, 0:1]
        kx = cols - big + shifts[:, 1:2]
        cb = self.pupil.cutoff_bins
        h = (ky[:, :, None] ** 2 + kx[:, None, :] ** 2) <= cb * cb * (1 + 1e-12)
        return rows, cols, h

    def _compute(self, shifts: list[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
        rows, cols, h = self.window(np.array(shifts))
        ey = self.basis.ey
        sub = self.spectrum[rows[:, :, None], cols[:, None, :]] * h
        amp = np.matmul(ey[:, rows].transpose(1, 0, 2), np.matmul(sub, ey[:, cols].transpose(1, 2, 0)))
        power = np.abs(amp)
        np.square(power, out=power)
        return amp, power

    def ensure(self, plan: SourcePlan) -> None:
        missing = []
        for s in plan.shifts:
            key = mirror_key(s)[0]
            if key not in self._power and key not in missing:
                missing.append(key)
        if not missing:
            return
        size = self.cfg.chunk_size if _pool(self.cfg.parallel_width) is not None else len(missing)
        chunks = [missing[i : i + size] for i in range(0, len(missing), size)]
        results = _run_chunks(lambda c: (c, *self._compute(c)), chunks, self.cfg.parallel_width, True)
        for keys, amp, power in results:
            for i, key in enumerate(keys):
                self._fields[key] = amp[i]
                self._power[key] = power[i]

    def field(self, shift) -> np.ndarray:
        key, mirrored = mirror_key(shift)
        amp = self._fields[key]
        return amp.conj() if mirrored else amp

    def power(self, shift) -> np.ndarray:
        return self._power[mirror_key(shift)[0]]


def _paired_weights(plan: SourcePlan) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Group weights merged over mirror pairs, in first-appearance order."""
    order: dict[tuple[int, int], int] = {}
    weights: list[float] = []
    for g in range(plan.n_groups):
        key = mirror_key(plan.shifts[g])[0]
        if key in order:
            weights[order[key]] += plan.weights[g]
        else:
            order[key] = len(weights)
            weights.append(float(plan.weights[g]))
    return list(order), np.asarray(weights)


@dataclass
class AbbeState:
    """Forward intermediates kept for the adjoint pass."""

    plan: SourcePlan
    fields: MaskFields
    intensity: np.ndarray


def _resolve_threshold(threshold: float | None, cfg: OpticalConfig) -> float | None:
    if threshold is not None and np.isnan(threshold):
        return cfg.active_threshold
    return threshold


def abbe_intensity(fields: MaskFields, plan: SourcePlan, *, normalize: bool = True) -> np.ndarray:
    """Weighted sum of per-shift intensities.

    With ``cfg.deterministic`` the sum runs in ascending group order; otherwise
    chunk partial sums are combined as they finish.
    """
    fields.ensure(plan)
    cfg = fields.cfg
    n = fields.pupil.n
    keys, weights = _paired_weights(plan)
    if cfg.deterministic:
        intensity = np.zeros((n, n))
        for key, w in zip(keys, weights):
            intensity += w * fields.power(key)
    else:
        def partial(idx):
            acc = np.zeros((n, n))
            for i in idx:
                acc += weights[i] * fields.power(keys[i])
            return acc

        intensity = np.zeros((n, n))
        size = cfg.chunk_size
        chunks = [np.arange(i, min(i + size, len(keys))) for i in range(0, len(keys), size)]
        for acc in _run_chunks(partial, chunks, cfg.parallel_width, False):
            intensity += acc
    if normalize and plan.total > 0:
        intensity /= plan.total
    return intensity


def abbe_forward(
    source: SourceGrid,
    mask: MaskGrid | np.ndarray | MaskFields,
    pupil: Pupil,
    cfg: OpticalConfig,
    *,
    threshold: float | None = FROM_CONFIG,
    normalize: bool = True,
) -> AbbeState:
    if isinstance(mask, MaskFields):
        fields = mask
    else:
        m = mask.transmission if isinstance(mask, MaskGrid) else mask
        fields = MaskFields(m, pupil, cfg)
    threshold = _resolve_threshold(threshold, cfg)
    plan = plan_source(source, pupil, threshold)
    if plan.n_groups == 0 or (threshold is not None and plan.total <= 0):
        raise DarkSourceError("no source point above the activity threshold")
    return AbbeState(plan, fields, abbe_intensity(fields, plan, normalize=normalize))


def abbe_aerial(
    source: SourceGrid,
    mask: MaskGrid | np.ndarray,
    pupil: Pupil,
    cfg: OpticalConfig,
    *,
    threshold: float | None = FROM_CONFIG,
    normalize: bool = True,
) -> AerialImage:
    """Partially coherent aerial image by summing source-point contributions.

    ``threshold=None`` disables the activity cut; an all-dark source then
    gives a zero image instead of raising.
    """
    state = abbe_forward(source, mask, pupil, cfg, threshold=threshold, normalize=normalize)
    return AerialImage(state.intensity)


def abbe_backward(
    state: AbbeState,
    upstream: np.ndarray,
    *,
    want_mask: bool = True,
) -> tuple[np.ndarray | None, np.ndarray]:
    """Adjoint of the normalized Abbe image.

    Given ``upstream = dL/dI`` returns ``(dL/dmask, dL/dsource)``; the source
    part includes the quotient rule of the energy normalization.
    """
    plan, fields = state.plan, state.fields
    cfg, pupil, basis = fields.cfg, fields.pupil, fields.basis
    n = pupil.n
    baseline = float(np.sum(upstream * state.intensity))
    energy = np.array([np.sum(upstream * fields.power(s)) for s in plan.shifts])
    per_group = (energy - baseline) / plan.total
    d_source = np.zeros(plan.group_of.shape)
    act = plan.group_of >= 0
    d_source[act] = per_group[plan.group_of[act]]
    if not want_mask:
        return None, d_source

    ey_c = basis.ey.conj()

    def work(groups: np.ndarray):
        rows, cols, h = fields.window(plan.shifts[groups])
        u = np.stack([upstream * fields.field(plan.shifts[g]) for g in groups])
        proj = (n * n) * np.matmul(ey_c[:, rows].transpose(1, 2, 0), np.matmul(u, ey_c[:, cols].transpose(1, 0, 2)))
        proj *= h * plan.weights[groups][:, None, None]
        back = np.zeros((len(basis.idx),) * 2, dtype=complex)
        for i in range(len(groups)):
            back[np.ix_(rows[i], cols[i])] += proj[i]
        return back

    back_total = np.zeros((len(basis.idx),) * 2, dtype=complex)
    for back in _run_chunks(work, plan.chunks(cfg.chunk_size), cfg.parallel_width, cfg.deterministic):
        back_total += back
    d_mask = (2.0 / plan.total) * basis.synth(back_total).real
    return d_mask, d_source


def build_tcc(source: SourceGrid, pupil: Pupil, cfg: OpticalConfig, *, threshold: float | None = FROM_CONFIG) -> TccMatrix:
    """Transmission cross-coefficients on the in-band frequency window.

    The window is the union of all shifted pupil supports, so nothing outside
    it can carry energy.
    """
    threshold = _resolve_threshold(threshold, cfg)
    plan = plan_source(source, pupil, threshold)
    if plan.n_groups == 0 or plan.total <= 0:
        raise DarkSourceError("no source point above the activity threshold")
    n = pupil.n
    cb = pupil.cutoff_bins
    support = np.zeros((n, n), dtype=bool)
    for sy, sx in plan.shifts:
        support |= _shifted_pupil(n, cb, int(sy), int(sx))
    flat = np.flatnonzero(support.ravel())
    h = np.empty((plan.n_groups, len(flat)))
    for g, (sy, sx) in enumerate(plan.shifts):
        h[g] = _shifted_pupil(n, cb, int(sy), int(sx)).ravel()[flat]
    entries = (h.T * (plan.weights / plan.total)) @ h
    k = freq_index(n)
    iy, ix = np.unravel_index(flat, (n, n))
    band = np.stack([k[iy], k[ix]], axis=1)
    return TccMatrix(entries.astype(complex), band, n)


def socs_decompose(tcc: TccMatrix, q: int) -> SocsKernels:
    """Top-q eigenpairs of the TCC as spatial-domain coherent kernels."""
    if q < 0:
        raise ConfigError("q must be non-negative")
    dim = tcc.entries.shape[0]
    if q > dim:
        warnings.warn(f"q={q} exceeds TCC dimension {dim}; clamping", stacklevel=2)
        q = dim
    n = tcc.n
    vals, vecs = np.linalg.eigh(tcc.entries)
    order = np.argsort(-np.abs(vals), kind="stable")[:q]
    vals = vals[order]
    vecs = vecs[:, order]
    spectra = np.zeros((q, n, n), dtype=complex)
    iy = tcc.band_index[:, 0] % n
    ix = tcc.band_index[:, 1] % n
    for i in range(q):
        spectra[i, iy, ix] = vecs[:, i]
    kernels = sfft.ifft2(spectra, axes=(-2, -1)) if q else np.zeros((0, n, n), dtype=complex)
    radius = int(np.abs(tcc.band_index).max()) if dim else 0
    return SocsKernels(vals.real.copy(), kernels, spectra, q, radius)


def full_spectrum(tcc: TccMatrix) -> np.ndarray:
    """All TCC eigenvalues, descending."""
    return np.sort(np.linalg.eigvalsh(tcc.entries))[::-1]


def hopkins_aerial(kernels: SocsKernels, mask: MaskGrid | np.ndarray, q: int | None = None) -> AerialImage:
    m = mask.transmission if isinstance(mask, MaskGrid) else np.asarray(mask, dtype=float)
    q = kernels.q_used if q is None else min(q, kernels.q_used)
    if q and m.shape != kernels.spectra.shape[1:]:
        raise ConfigError(f"mask shape {m.shape} does not match kernels {kernels.spectra.shape[1:]}")
    intensity = np.zeros(m.shape)
    if q == 0:
        return AerialImage(intensity)
    basis = band_basis(m.shape[0], kernels.band_radius)
    box = kernels.spectra[:q][:, basis.idx][:, :, basis.idx]
    amp = basis.synth(box * basis.take(sfft.fft2(m)))
    for i in range(q):
        intensity += kernels.eigenvalues[i] * (amp[i].real ** 2 + amp[i].imag ** 2)
    return AerialImage(intensity)


def resist(aerial: AerialImage | np.ndarray, cfg: OpticalConfig) -> ResistImage:
    i = aerial.intensity if isinstance(aerial, AerialImage) else np.asarray(aerial)
    return ResistImage(sigmoid(cfg.resist_steepness * (i - cfg.resist_threshold)))


@dataclass(frozen=True)
class ProcessWindow:
    nominal: ResistImage
    low: ResistImage
    high: ResistImage
    aerial: AerialImage


def forward_process_window(theta_J: ParamField, theta_M: ParamField, cfg: OpticalConfig) -> ProcessWindow:
    """Resist images at nominal, minimum and maximum dose.

    Scaling the mask by a dose d scales the (quadratic) image by d**2, so one
    Abbe pass serves all three conditions.
    """
    theta_J.check_shape(cfg)
    theta_M.check_shape(cfg)
    source = activate_source(theta_J, cfg)
    mask = activate_mask(theta_M, cfg)
    aerial = abbe_aerial(source, mask, build_pupil(cfg), cfg)
    i = aerial.intensity
    return ProcessWindow(
        resist(i, cfg),
        resist(cfg.dose_min ** 2 * i, cfg),
        resist(cfg.dose_max ** 2 * i, cfg),
        aerial,
    )
