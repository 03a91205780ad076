import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from carfit3d.car_models import build_default_maps
from carfit3d.synth import synthetic_calibration

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def maps():
    return build_default_maps(n_points=60_000)


@pytest.fixture(scope="session")
def calib():
    return synthetic_calibration()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
