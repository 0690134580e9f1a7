import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260823)


@pytest.fixture
def abs_gaussian():
    def make(n, d=3, seed=0):
        return np.abs(np.random.default_rng(seed).standard_normal((n, d)))

    return make
