import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sdit import tensor as tn

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", parent=settings.get_profile("default"), max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def f64():
    with tn.precision(64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
