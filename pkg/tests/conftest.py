import numpy as np
import pytest

from lensless_hps.bodymodel import make_toy_model


@pytest.fixture(scope="session")
def toy_model():
    return make_toy_model(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
