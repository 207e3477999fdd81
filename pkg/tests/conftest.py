import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.register_profile("thorough", max_examples=300, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Ten small phantoms shared by the data, training and CLI tests."""
    from bxlstm_petct.phantom import PhantomSpec, generate_corpus

    out = tmp_path_factory.mktemp("corpus")
    spec = PhantomSpec(seed=7, dims=(16, 24, 24), lesion_radius_mm_range=(2.0, 3.5))
    generate_corpus(spec, 10, out)
    return out
