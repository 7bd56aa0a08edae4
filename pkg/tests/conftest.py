import numpy as np
import pytest

from excavplan.config import load_model
from excavplan.oracles import random_states


@pytest.fixture(scope="session")
def model():
    return load_model()


@pytest.fixture(scope="session")
def params(model):
    return model[0]


@pytest.fixture(scope="session")
def limits(model):
    return model[1]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def states(params, limits, rng):
    """100 random admissible cylinder states (q_L, qd_L)."""
    return random_states(params, limits, 100, rng)
