import numpy as np
import pytest

from photocal.core.rng import make_rng


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator for test data."""
    return make_rng(12345)


@pytest.fixture
def out_dir(tmp_path):
    """Empty output directory."""
    path = tmp_path / "out"
    path.mkdir()
    return path


@pytest.fixture
def reference_peak_counts():
    """Reference heralded / unheralded peak counts and heralding purity."""
    return {
        "C": [5.069e6, 5.020e4, 118.0],
        "C_bar": [5.103e6, 1.460e4, 23.9],
        "xi": 0.98794,
    }
