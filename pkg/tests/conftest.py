import numpy as np
import pytest

from pittile import flop_proportional_profile, profile, register_builtin_kernels


@pytest.fixture(scope="session")
def registry():
    return register_builtin_kernels()


@pytest.fixture(scope="session")
def flop_profile(registry):
    return flop_proportional_profile(registry)


@pytest.fixture(scope="session")
def measured_profile(registry):
    return profile(registry, reps=5, warmup=2, reps_inner=200)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
