import numpy as np
import pytest

from data_utils import gen_toy_gaussians
from nn_utils import MlpSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_spec():
    return MlpSpec(2, (20,), 2)


@pytest.fixture
def toy_data():
    return gen_toy_gaussians(32, seed=5)
