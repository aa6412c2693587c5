import numpy as np
import pytest


@pytest.fixture
def database():
    return np.random.default_rng(123).integers(0, 2, 100, dtype=np.uint8)
