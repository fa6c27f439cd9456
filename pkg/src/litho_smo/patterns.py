"""Target ingestion (rectangle lists and graymaps) and the synthetic suite."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, OpticalConfig
from .core import TargetPattern


class PatternError(ConfigError):
    """Malformed or out-of-tile pattern input."""


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle in nm, origin at the lower-left of the tile."""

    x1: int
    y1: int
    x2: int
    y2: int


def parse_rects(text: str, source: str = "<string>") -> list[Rect]:
    rects = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if parts[0].upper() != "RECT" or len(parts) != 5:
            raise PatternError(f"{source}:{lineno}: expected 'RECT x1 y1 x2 y2', got {raw.strip()!r}")
        try:
            x1, y1, x2, y2 = (int(p) for p in parts[1:])
        except ValueError:
            raise PatternError(f"{source}:{lineno}: coordinates must be integers") from None
        if x2 <= x1 or y2 <= y1:
            raise PatternError(f"{source}:{lineno}: rectangle has non-positive extent")
        rects.append(Rect(x1, y1, x2, y2))
    return rects


def format_rects(rects: list[Rect]) -> str:
    return "".join(f"RECT {r.x1} {r.y1} {r.x2} {r.y2}\n" for r in rects)


def rasterize(rects: list[Rect], n: int, pixel_nm: float) -> np.ndarray:
    """Fill every pixel whose centre lies inside a rectangle (half-open)."""
    tile = n * pixel_nm
    centres = (np.arange(n) + 0.5) * pixel_nm
    out = np.zeros((n, n), dtype=np.uint8)
    for i, r in enumerate(rects):
        if r.x1 < 0 or r.y1 < 0 or r.x2 > tile or r.y2 > tile:
            raise PatternError(f"rectangle {i + 1} ({r.x1} {r.y1} {r.x2} {r.y2}) lies outside the {tile:g} nm tile")
        cols = (centres >= r.x1) & (centres < r.x2)
        rows = (centres >= r.y1) & (centres < r.y2)
        out[np.ix_(rows, cols)] = 1
    return out


def read_graymap(path: str | Path) -> np.ndarray:
    """Graymap pixels as uint8 with row 0 at the bottom of the tile."""
    with Image.open(path) as img:
        if img.mode not in ("L", "1", "I"):
            raise PatternError(f"{path}: expected a grayscale graymap, got mode {img.mode}")
        arr = np.asarray(img.convert("L"))
    return arr[::-1].copy()


def write_graymap(path: str | Path, values: np.ndarray) -> None:
    """Write uint8 values (row 0 = bottom) as a binary graymap."""
    arr = np.asarray(values)
    if arr.dtype != np.uint8:
        raise TypeError("write_graymap expects uint8 values")
    Image.fromarray(arr[::-1].copy(), mode="L").save(path, format="PPM")


def quantize(field: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to 8-bit gray levels."""
    return np.clip(np.rint(np.asarray(field, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def binary_graymap(bits: np.ndarray) -> np.ndarray:
    return np.where(np.asarray(bits) != 0, 255, 0).astype(np.uint8)


def resample_binary(bits: np.ndarray, n: int) -> np.ndarray:
    """Resize a square binary raster to n x n by an integer factor.

    Upsampling repeats pixels; downsampling keeps a block when at least half
    of it is set.
    """
    m = bits.shape[0]
    if bits.shape != (m, m):
        raise PatternError(f"raster must be square, got {bits.shape}")
    if m == n:
        return bits.astype(np.uint8)
    if n % m == 0:
        k = n // m
        return np.kron(bits, np.ones((k, k), dtype=np.uint8)).astype(np.uint8)
    if m % n == 0:
        k = m // n
        blocks = bits.reshape(n, k, n, k).mean(axis=(1, 3))
        return (blocks >= 0.5).astype(np.uint8)
    raise PatternError(f"raster size {m} is not an integer multiple or divisor of n_mask={n}")


def ingest_pattern(path: str | Path, cfg: OpticalConfig) -> TargetPattern:
    """Load a rectangle list or a graymap as a binary target."""
    path = Path(path)
    head = path.read_bytes()[:2]
    if head in (b"P2", b"P5"):
        bits = (read_graymap(path) >= 128).astype(np.uint8)
        return TargetPattern(resample_binary(bits, cfg.n_mask), cfg.pixel_nm)
    try:
        text = path.read_text()
    except UnicodeDecodeError:
        raise PatternError(f"{path}: neither a rectangle list nor a graymap") from None
    rects = parse_rects(text, str(path))
    return TargetPattern(rasterize(rects, cfg.n_mask, cfg.pixel_nm), cfg.pixel_nm)


# --------------------------------------------------------------------------- synthetic suite

SUITE_NAMES = ("isolated_line", "dense_lines", "l_shape", "t_junction", "contact_array", "mixed")
SUITE_SEEDS = {name: 101 + i for i, name in enumerate(SUITE_NAMES)}


def _jitter(rng: np.random.Generator, amount: int = 8) -> int:
    # multiples of 4 nm so features stay pixel-aligned on the 4 nm grid
    return 4 * int(rng.integers(-amount // 4, amount // 4 + 1))


def suite_rects(name: str, seed: int | None = None) -> list[Rect]:
    """Rectangles (nm) of one suite target on a 512 nm tile."""
    if name not in SUITE_NAMES:
        raise PatternError(f"unknown suite target {name!r}; choose from {', '.join(SUITE_NAMES)}")
    rng = np.random.default_rng(SUITE_SEEDS[name] if seed is None else seed)
    dx, dy = _jitter(rng), _jitter(rng)
    if name == "isolated_line":
        return [Rect(224 + dx, 96 + dy, 288 + dx, 416 + dy)]
    if name == "dense_lines":
        return [Rect(x + dx, 96 + dy, x + 56 + dx, 416 + dy) for x in (116, 228, 340)]
    if name == "l_shape":
        return [Rect(144 + dx, 112 + dy, 208 + dx, 400 + dy), Rect(144 + dx, 112 + dy, 384 + dx, 176 + dy)]
    if name == "t_junction":
        return [Rect(112 + dx, 336 + dy, 400 + dx, 400 + dy), Rect(224 + dx, 112 + dy, 288 + dx, 400 + dy)]
    if name == "contact_array":
        return [Rect(x + dx, y + dy, x + 72 + dx, y + 72 + dy) for y in (112, 328) for x in (112, 328)]
    # mixed: a bent line plus two contacts with independent jitter
    rects = [Rect(96 + dx, 96 + dy, 160 + dx, 416 + dy), Rect(96 + dx, 352 + dy, 272 + dx, 416 + dy)]
    for cx, cy in ((336, 128), (336, 272)):
        ox, oy = _jitter(rng), _jitter(rng)
        rects.append(Rect(cx + ox, cy + oy, cx + 72 + ox, cy + 72 + oy))
    return rects


def suite_target(name: str, cfg: OpticalConfig | None = None, seed: int | None = None) -> TargetPattern:
    """Rasterized suite target; the geometry is defined on a 512 nm tile."""
    cfg = cfg or OpticalConfig()
    rects = suite_rects(name, seed)
    tile = cfg.n_mask * cfg.pixel_nm
    if tile != 512:
        s = tile / 512.0
        rects = [Rect(*(int(round(v * s)) for v in (r.x1, r.y1, r.x2, r.y2))) for r in rects]
    return TargetPattern(rasterize(rects, cfg.n_mask, cfg.pixel_nm), cfg.pixel_nm)


def write_suite(directory: str | Path) -> list[Path]:
    """Write every suite target as a rectangle-list file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for name in SUITE_NAMES:
        p = directory / f"{name}.rects"
        p.write_text(format_rects(suite_rects(name)))
        paths.append(p)
    return paths
