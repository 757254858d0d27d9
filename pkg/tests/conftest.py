import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "dgml",
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("dgml")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
