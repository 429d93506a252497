import numpy as np
import pytest

from domcond.data import synthetic_digits


@pytest.fixture(scope="session")
def digits_small():
    """Small rendered-digit dataset shared across tests."""
    return synthetic_digits(1200, seed=11)


@pytest.fixture(scope="session")
def digits_test():
    return synthetic_digits(600, seed=23)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
