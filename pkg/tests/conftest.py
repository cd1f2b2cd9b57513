import numpy as np
import pytest

from facefit import make_synthetic_model, make_synthetic_performance


@pytest.fixture(scope="session")
def small_model():
    return make_synthetic_model(n_vertices=200, n_id=8, n_exp=5, seed=0)


@pytest.fixture(scope="session")
def small_performance(small_model):
    return make_synthetic_performance(small_model, n_frames=6, seed=1)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
