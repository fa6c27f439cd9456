import numpy as np
import pytest

from litho_smo.config import OpticalConfig


def small_config(n_mask=32, n_source=3, pixel_nm=16.0, **kw) -> OpticalConfig:
    return OpticalConfig(n_mask=n_mask, n_source=n_source, pixel_nm=pixel_nm, **kw)


def random_target(n, seed=0, blocks=3):
    """A few random rectangles on an n x n raster."""
    rng = np.random.default_rng(seed)
    t = np.zeros((n, n), dtype=np.uint8)
    for _ in range(blocks):
        y, x = rng.integers(1, n - max(3, n // 4), size=2)
        h, w = rng.integers(2, max(3, n // 4), size=2)
        t[y:y + h, x:x + w] = 1
    return t


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
