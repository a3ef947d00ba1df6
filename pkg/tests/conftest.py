import numpy as np
import pytest

from protopyramid import autodiff as ad


@pytest.fixture(autouse=True)
def float64_default():
    # finite-difference checks are only meaningful at 64-bit
    ad.set_default_dtype(np.float64)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
