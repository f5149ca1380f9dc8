import numpy as np
import pytest

from deepkanseg.tensor import default_dtype, set_default_dtype


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def f64():
    """Run a test under float64 default dtype, restoring afterwards."""
    previous = default_dtype()
    set_default_dtype("float64")
    yield np.float64
    set_default_dtype(previous)
