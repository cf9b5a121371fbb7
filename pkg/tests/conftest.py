import numpy as np
import pytest

from mvstereo import autodiff as ad


@pytest.fixture
def f64():
    """Run a test under 64-bit element precision."""
    with ad.precision("float64"):
        yield


@pytest.fixture
def f32():
    with ad.precision("float32"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
