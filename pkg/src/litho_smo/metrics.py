"""Evaluation metrics on binarized resist images: L2 area, PVB area, EPE."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .config import ConfigError
from .core import EdgeSegment, TargetPattern
from .imaging import ResistImage


@dataclass(frozen=True)
class BinaryImage:
    pixels: np.ndarray
    pixel_nm: float = 1.0

    def __post_init__(self) -> None:
        p = np.asarray(self.pixels)
        if p.ndim != 2 or not np.isin(p, (0, 1)).all():
            raise ConfigError("BinaryImage must be a 2-D array of zeros and ones")
        object.__setattr__(self, "pixels", p.astype(np.uint8))


@dataclass(frozen=True)
class EpeSpec:
    sample_step_nm: float = 40.0
    threshold_nm: float = 15.0

    def __post_init__(self) -> None:
        if self.sample_step_nm <= 0 or self.threshold_nm <= 0:
            raise ConfigError("EPE sample step and threshold must be positive")


@dataclass(frozen=True)
class EpeResult:
    violations: int
    n_points: int
    # signed nm, positive when the print extends past the target edge
    displacements: np.ndarray

    @property
    def mean_abs_nm(self) -> float:
        return float(np.mean(np.abs(self.displacements))) if self.n_points else 0.0


def binarize(z: ResistImage | np.ndarray, cut: float = 0.5, pixel_nm: float = 1.0) -> BinaryImage:
    if not 0 < cut < 1:
        raise ConfigError("cut must lie in (0, 1)")
    values = z.values if isinstance(z, ResistImage) else np.asarray(z, dtype=float)
    return BinaryImage((values >= cut).astype(np.uint8), pixel_nm)


def _bits(img: BinaryImage | TargetPattern | np.ndarray) -> np.ndarray:
    if isinstance(img, (BinaryImage, TargetPattern)):
        return img.pixels
    return np.asarray(img)


def _check(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ConfigError(f"shape mismatch {a.shape} vs {b.shape}")


def metric_l2(z: BinaryImage, target: TargetPattern | BinaryImage) -> float:
    """Differing-pixel area in nm^2."""
    a, b = _bits(z), _bits(target)
    _check(a, b)
    return float(np.count_nonzero(a != b)) * target.pixel_nm ** 2


def metric_pvb(z_min: BinaryImage, z_max: BinaryImage) -> float:
    """XOR area between the extreme-dose prints in nm^2."""
    a, b = _bits(z_min), _bits(z_max)
    _check(a, b)
    if z_min.pixel_nm != z_max.pixel_nm:
        raise ConfigError("images have different pixel sizes")
    return float(np.count_nonzero(a ^ b)) * z_min.pixel_nm ** 2


def sample_points(seg: EdgeSegment, step_nm: float) -> list[float]:
    """Positions along the edge, spaced ``step_nm`` and centred on it."""
    length = seg.length
    start = seg.x0 if seg.horizontal else seg.y0
    n = int(math.floor(length / step_nm + 1e-9))
    if n <= 1:
        return [start + length / 2.0]
    offset = (length - (n - 1) * step_nm) / 2.0
    return [start + offset + k * step_nm for k in range(n)]


def _displacement(bits: np.ndarray, seg: EdgeSegment, pos_nm: float, pixel_nm: float, horizon: int) -> int:
    """Signed contour offset in pixels at one sample point, capped at the horizon."""
    ny, nx = bits.shape

    def at(iy: int, ix: int) -> int:
        return int(bits[iy, ix]) if 0 <= iy < ny and 0 <= ix < nx else 0

    nx_, ny_ = seg.normal
    along = int(math.floor(pos_nm / pixel_nm))
    if seg.horizontal:
        b = int(round(seg.y0 / pixel_nm))
        inside = (b - 1, along) if ny_ > 0 else (b, along)
        dy, dx = ny_, 0
    else:
        b = int(round(seg.x0 / pixel_nm))
        inside = (along, b - 1) if nx_ > 0 else (along, b)
        dy, dx = 0, nx_
    iy, ix = inside
    if at(iy, ix):
        # printed at the edge: walk outward while still printed
        d = 0
        while d < horizon and at(iy + (d + 1) * dy, ix + (d + 1) * dx):
            d += 1
        return d
    d = 1
    while d < horizon and not at(iy - d * dy, ix - d * dx):
        d += 1
    return -d


def epe_measure(z: BinaryImage, target: TargetPattern, spec: EpeSpec = EpeSpec()) -> EpeResult:
    bits = _bits(z)
    _check(bits, target.pixels)
    if not target.edge_segments:
        warnings.warn("target has no edges; EPE is 0", RuntimeWarning, stacklevel=2)
        return EpeResult(0, 0, np.zeros(0))
    p = target.pixel_nm
    horizon = max(1, int(math.ceil(2 * spec.threshold_nm / p)))
    disp = [
        _displacement(bits, seg, pos, p, horizon) * p
        for seg in target.edge_segments
        for pos in sample_points(seg, spec.sample_step_nm)
    ]
    d = np.asarray(disp, dtype=float)
    return EpeResult(int(np.count_nonzero(np.abs(d) > spec.threshold_nm)), d.size, d)


def metric_epe(z: BinaryImage, target: TargetPattern, spec: EpeSpec = EpeSpec()) -> int:
    """Number of edge sample points whose contour offset exceeds the threshold."""
    return epe_measure(z, target, spec).violations
