import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def random_spd(rng, d, floor=0.3):
    A = rng.normal(size=(d, d))
    return A @ A.T + floor * np.eye(d)


def random_symmetric(rng, d):
    A = rng.normal(size=(d, d))
    return A + A.T
