"""SMO loss, analytic gradients, and finite-difference curvature products."""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import ConfigError, OpticalConfig
from .core import ParamField, ParamKind, SourceGrid, TargetPattern, sigmoid, source_coords
from .imaging import (
    MaskFields,
    ResistImage,
    abbe_backward,
    abbe_forward,
    build_pupil,
    resist,
)


@dataclass(frozen=True)
class LossValue:
    total: float
    l2_term: float
    pvb_term: float


@dataclass(frozen=True)
class GradPair:
    wrt_source: np.ndarray
    wrt_mask: np.ndarray


def _values(z: ResistImage | np.ndarray) -> np.ndarray:
    return z.values if isinstance(z, ResistImage) else np.asarray(z, dtype=float)


def _target(target: TargetPattern | np.ndarray) -> np.ndarray:
    return target.pixels if isinstance(target, TargetPattern) else np.asarray(target)


def loss_l2(z: ResistImage | np.ndarray, target: TargetPattern | np.ndarray) -> float:
    """Squared L2 distance summed over pixels."""
    zv, t = _values(z), _target(target)
    if zv.shape != t.shape:
        raise ConfigError(f"shape mismatch {zv.shape} vs {t.shape}")
    return float(np.sum((zv - t) ** 2))


def loss_pvb(z_min, z_max, target) -> float:
    return loss_l2(z_max, target) + loss_l2(z_min, target)


class SmoObjective:
    """The SMO loss as a function of raw source and mask parameter arrays.

    Coherent fields of the most recent masks are cached, so repeated calls
    that only move the source parameters skip the expensive transforms.
    """

    def __init__(self, cfg: OpticalConfig, target: TargetPattern | np.ndarray, *, cache_size: int = 2):
        self.cfg = cfg
        self.target = _target(target).astype(float)
        if self.target.shape != (cfg.n_mask, cfg.n_mask):
            raise ConfigError(f"target shape {self.target.shape} does not match n_mask={cfg.n_mask}")
        self.pupil = build_pupil(cfg)
        self.fx, self.fy = source_coords(cfg)
        self._cache: OrderedDict[bytes, MaskFields] = OrderedDict()
        self._cache_size = cache_size
        self.calls = 0

    def mask_fields(self, theta_M: np.ndarray) -> MaskFields:
        key = np.ascontiguousarray(theta_M, dtype=float).tobytes()
        hit = self._cache.get(key)
        if hit is not None:
            self._cache.move_to_end(key)
            return hit
        fields = MaskFields(sigmoid(self.cfg.alpha_m * theta_M), self.pupil, self.cfg)
        self._cache[key] = fields
        while len(self._cache) > self._cache_size:
            self._cache.popitem(last=False)
        return fields

    def evaluate(
        self,
        theta_J: np.ndarray,
        theta_M: np.ndarray,
        *,
        want_source: bool = True,
        want_mask: bool = True,
    ) -> tuple[LossValue, GradPair | None]:
        cfg = self.cfg
        theta_J = np.asarray(theta_J, dtype=float)
        theta_M = np.asarray(theta_M, dtype=float)
        if theta_J.shape != (cfg.n_source, cfg.n_source) or theta_M.shape != (cfg.n_mask, cfg.n_mask):
            raise ConfigError("parameter shapes do not match the configuration")
        if not (np.all(np.isfinite(theta_J)) and np.all(np.isfinite(theta_M))):
            raise FloatingPointError("non-finite parameters")
        self.calls += 1
        j = sigmoid(cfg.alpha_j * theta_J)
        fields = self.mask_fields(theta_M)
        state = abbe_forward(SourceGrid(j, self.fx, self.fy), fields, self.pupil, cfg)
        intensity = state.intensity
        t = self.target
        beta = cfg.resist_steepness
        l2 = pvb = 0.0
        upstream = np.zeros_like(intensity)
        for dose, weight, is_nominal in ((1.0, cfg.gamma, True), (cfg.dose_min, cfg.eta, False), (cfg.dose_max, cfg.eta, False)):
            z = resist(dose * dose * intensity, cfg).values
            r = z - t
            term = float(np.sum(r * r))
            if is_nominal:
                l2 = term
            else:
                pvb += term
            if want_source or want_mask:
                upstream += (weight * 2.0 * beta * dose * dose) * r * z * (1.0 - z)
        loss = LossValue(cfg.gamma * l2 + cfg.eta * pvb, l2, pvb)
        if not (want_source or want_mask):
            return loss, None
        d_mask, d_source = abbe_backward(state, upstream, want_mask=want_mask)
        g_source = d_source * cfg.alpha_j * j * (1.0 - j)
        if want_mask:
            m = fields.mask
            g_mask = d_mask * cfg.alpha_m * m * (1.0 - m)
        else:
            g_mask = np.zeros_like(theta_M)
        return loss, GradPair(g_source, g_mask)

    def loss(self, theta_J, theta_M) -> LossValue:
        return self.evaluate(theta_J, theta_M, want_source=False, want_mask=False)[0]

    def grad(self, theta_J, theta_M) -> GradPair:
        return self.evaluate(theta_J, theta_M)[1]

    def grad_source(self, theta_J, theta_M) -> np.ndarray:
        return self.evaluate(theta_J, theta_M, want_mask=False)[1].wrt_source

    def grad_mask(self, theta_J, theta_M) -> np.ndarray:
        return self.evaluate(theta_J, theta_M, want_source=False)[1].wrt_mask

    def hvp_jj(self, theta_J, theta_M, v, eps: float) -> np.ndarray:
        return central_difference(lambda x: self.grad_source(x, theta_M), theta_J, v, eps)

    def jvp_mj(self, theta_J, theta_M, w, eps: float) -> np.ndarray:
        return central_difference(lambda x: self.grad_mask(x, theta_M), theta_J, w, eps)


def central_difference(grad_fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, v: np.ndarray, eps: float) -> np.ndarray | float:
    """Directional derivative of ``grad_fn`` at ``x`` along ``v``.

    The step is ``eps / max|v|`` so the perturbation has max-norm ``eps``.
    """
    if eps <= 0:
        raise ConfigError("eps must be positive")
    v = np.asarray(v, dtype=float)
    scale = float(np.max(np.abs(v))) if v.size else 0.0
    if scale == 0.0:
        return np.zeros_like(np.asarray(grad_fn(x)))
    h = eps / max(scale, 1e-12)
    return (grad_fn(x + h * v) - grad_fn(x - h * v)) / (2.0 * h)


def _objective(cfg: OpticalConfig, target) -> SmoObjective:
    return SmoObjective(cfg, target)


def _arr(theta: ParamField | np.ndarray, kind: ParamKind) -> np.ndarray:
    if isinstance(theta, ParamField):
        if theta.kind is not kind:
            raise ConfigError(f"expected {kind.value} parameters")
        return theta.values
    return np.asarray(theta, dtype=float)


def loss_smo(theta_J, theta_M, cfg: OpticalConfig, target) -> LossValue:
    return _objective(cfg, target).loss(_arr(theta_J, ParamKind.SOURCE), _arr(theta_M, ParamKind.MASK))


def grad_smo(theta_J, theta_M, cfg: OpticalConfig, target) -> GradPair:
    return _objective(cfg, target).grad(_arr(theta_J, ParamKind.SOURCE), _arr(theta_M, ParamKind.MASK))


def hvp_so_jj(theta_J, theta_M, v, cfg: OpticalConfig, target, eps: float = 1e-2) -> np.ndarray:
    """Source-source Hessian of the SMO loss applied to ``v``."""
    return _objective(cfg, target).hvp_jj(_arr(theta_J, ParamKind.SOURCE), _arr(theta_M, ParamKind.MASK), v, eps)


def jvp_so_mj(theta_J, theta_M, w, cfg: OpticalConfig, target, eps: float = 1e-2) -> np.ndarray:
    """``w`` contracted with the mixed mask/source Hessian; mask-shaped."""
    return _objective(cfg, target).jvp_mj(_arr(theta_J, ParamKind.SOURCE), _arr(theta_M, ParamKind.MASK), w, eps)


def finite_difference_grad(
    fn: Callable[[np.ndarray], float],
    x: np.ndarray,
    step: float = 1e-4,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    x = np.asarray(x, dtype=float)
    out = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    flat_idx = range(x.size) if indices is None else indices
    for i in flat_idx:
        xp = x.copy()
        xm = x.copy()
        xp.flat[i] += step
        xm.flat[i] -= step
        out.flat[i] = (fn(xp) - fn(xm)) / (2.0 * step)
    return out


def relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    """Max-norm error relative to the max-norm of the reference."""
    mask = np.isfinite(reference)
    diff = np.max(np.abs(analytic[mask] - reference[mask])) if mask.any() else 0.0
    scale = np.max(np.abs(reference[mask])) if mask.any() else 0.0
    if scale == 0.0:
        return float(diff)
    return float(diff / scale)
