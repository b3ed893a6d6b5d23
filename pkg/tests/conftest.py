import numpy as np
import pytest

from kamreduce.cli import build_params, load_config, run_reduction


@pytest.fixture(scope="session")
def ref_config():
    return load_config()


@pytest.fixture(scope="session")
def ref_params(ref_config):
    return build_params(ref_config)


@pytest.fixture(scope="session")
def ref_reduction(ref_params):
    """Reference run: n=1, J=8, M=1, eps=1e-3, V = 2 cos x cos theta, omega = 1.3, four steps."""
    return run_reduction(ref_params, nu_max=4, K_cap=32)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
