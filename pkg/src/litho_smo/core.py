"""Domain types, parameter activation/initialization and source templates."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .config import ConfigError, OpticalConfig


class NumericError(FloatingPointError):
    """Non-finite values reached a place that requires finite input."""


class ParamKind(str, enum.Enum):
    SOURCE = "source"
    MASK = "mask"


class SourceTemplate(str, enum.Enum):
    ANNULAR = "annular"
    QUASAR = "quasar"
    DIPOLE = "dipole"


@dataclass(frozen=True)
class ParamField:
    """Unconstrained optimization variables for the source or the mask."""

    values: np.ndarray
    kind: ParamKind

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ConfigError(f"parameter field must be square 2-D, got {values.shape}")
        object.__setattr__(self, "values", values)

    def check_shape(self, cfg: OpticalConfig) -> None:
        n = cfg.n_source if self.kind is ParamKind.SOURCE else cfg.n_mask
        if self.values.shape != (n, n):
            raise ConfigError(f"{self.kind.value} params have shape {self.values.shape}, expected {(n, n)}")

    def with_values(self, values: np.ndarray) -> "ParamField":
        return ParamField(values, self.kind)


@dataclass(frozen=True)
class SourceGrid:
    """Activated source intensities with their sigma-space coordinates.

    ``fx`` varies along columns, ``fy`` along rows; both span [-1, 1].
    """

    intensities: np.ndarray
    fx: np.ndarray
    fy: np.ndarray

    @property
    def radius(self) -> np.ndarray:
        return np.hypot(self.fx, self.fy)


@dataclass(frozen=True)
class MaskGrid:
    transmission: np.ndarray

    def binary(self) -> np.ndarray:
        return (self.transmission >= 0.5).astype(np.uint8)


@dataclass(frozen=True)
class EdgeSegment:
    """Axis-aligned target edge in nm with its outward normal (nx, ny)."""

    x0: float
    y0: float
    x1: float
    y1: float
    normal: tuple[int, int]

    @property
    def length(self) -> float:
        return abs(self.x1 - self.x0) + abs(self.y1 - self.y0)

    @property
    def horizontal(self) -> bool:
        return self.y0 == self.y1


@dataclass(frozen=True)
class TargetPattern:
    """Binary target raster indexed ``[iy, ix]`` with iy = 0 at the bottom."""

    pixels: np.ndarray
    pixel_nm: float
    edge_segments: list[EdgeSegment] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        pixels = np.asarray(self.pixels)
        if pixels.ndim != 2:
            raise ConfigError("target must be a 2-D array")
        if not np.isin(pixels, (0, 1)).all():
            raise ConfigError("target pixels must be 0 or 1")
        object.__setattr__(self, "pixels", pixels.astype(np.uint8))
        if self.edge_segments is None:
            object.__setattr__(self, "edge_segments", extract_edges(self.pixels, self.pixel_nm))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    @classmethod
    def from_array(cls, pixels: np.ndarray, pixel_nm: float) -> "TargetPattern":
        return cls(np.asarray(pixels), pixel_nm)


def _merge_runs(flags: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True in a 1-D boolean array as [start, stop)."""
    padded = np.concatenate(([False], flags, [False])).astype(np.int8)
    d = np.diff(padded)
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def extract_edges(pixels: np.ndarray, pixel_nm: float) -> list[EdgeSegment]:
    """Boundary of the 1-region as maximal axis-aligned segments.

    The raster is treated as zero outside its bounds, so features touching
    the tile border get an edge there too.
    """
    p = np.pad(np.asarray(pixels, dtype=bool), 1)
    ny, nx = pixels.shape
    edges: list[EdgeSegment] = []
    # horizontal edges live between rows; boundary index b means y = b*pixel
    for b in range(ny + 1):
        below, above = p[b, 1:-1], p[b + 1, 1:-1]
        for mask, normal in ((below & ~above, (0, 1)), (above & ~below, (0, -1))):
            for s, e in _merge_runs(mask):
                edges.append(EdgeSegment(s * pixel_nm, b * pixel_nm, e * pixel_nm, b * pixel_nm, normal))
    for b in range(nx + 1):
        left, right = p[1:-1, b], p[1:-1, b + 1]
        for mask, normal in ((left & ~right, (1, 0)), (right & ~left, (-1, 0))):
            for s, e in _merge_runs(mask):
                edges.append(EdgeSegment(b * pixel_nm, s * pixel_nm, b * pixel_nm, e * pixel_nm, normal))
    return edges


def sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def source_coords(cfg: OpticalConfig) -> tuple[np.ndarray, np.ndarray]:
    axis = np.linspace(-1.0, 1.0, cfg.n_source)
    fx, fy = np.meshgrid(axis, axis)
    return fx, fy


def source_template(template: SourceTemplate | str, cfg: OpticalConfig, opening_deg: float = 45.0) -> np.ndarray:
    """Binary template J_0 on the sigma grid.

    Annulus membership is inclusive on both radii. Quasar poles are wedges of
    ``opening_deg`` centred on the diagonals; dipole poles are centred on the
    horizontal axis.
    """
    template = SourceTemplate(template)
    fx, fy = source_coords(cfg)
    r = np.hypot(fx, fy)
    tol = 1e-12
    ring = (r >= cfg.sigma_inner - tol) & (r <= cfg.sigma_outer + tol)
    if template is SourceTemplate.ANNULAR:
        return ring.astype(np.uint8)
    angle = np.degrees(np.arctan2(fy, fx)) % 360.0
    half = opening_deg / 2.0
    centres = (45.0, 135.0, 225.0, 315.0) if template is SourceTemplate.QUASAR else (0.0, 180.0)
    wedge = np.zeros_like(ring)
    for c in centres:
        diff = np.abs((angle - c + 180.0) % 360.0 - 180.0)
        wedge |= diff <= half + tol
    return (ring & wedge).astype(np.uint8)


def init_mask_params(target: TargetPattern, cfg: OpticalConfig) -> ParamField:
    if target.shape != (cfg.n_mask, cfg.n_mask):
        raise ConfigError(f"target shape {target.shape} does not match n_mask={cfg.n_mask}")
    theta = np.where(target.pixels == 1, cfg.m0, -cfg.m0).astype(float)
    return ParamField(theta, ParamKind.MASK)


def init_source_params(template: SourceTemplate | str, cfg: OpticalConfig, opening_deg: float = 45.0) -> ParamField:
    j_init = source_template(template, cfg, opening_deg)
    theta = np.where(j_init == 1, cfg.j0, -cfg.j0).astype(float)
    return ParamField(theta, ParamKind.SOURCE)


def _check_finite(theta: ParamField) -> None:
    if not np.all(np.isfinite(theta.values)):
        raise NumericError(f"non-finite {theta.kind.value} parameters")


def activate_mask(theta: ParamField, cfg: OpticalConfig) -> MaskGrid:
    if theta.kind is not ParamKind.MASK:
        raise ConfigError("activate_mask needs mask parameters")
    _check_finite(theta)
    return MaskGrid(sigmoid(cfg.alpha_m * theta.values))


def activate_source(theta: ParamField, cfg: OpticalConfig) -> SourceGrid:
    if theta.kind is not ParamKind.SOURCE:
        raise ConfigError("activate_source needs source parameters")
    _check_finite(theta)
    fx, fy = source_coords(cfg)
    return SourceGrid(sigmoid(cfg.alpha_j * theta.values), fx, fy)
