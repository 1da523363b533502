import numpy as np
import pytest

from aegan.networks import AEGAN, NetworkConfig
from aegan.runtime import tune_allocator

tune_allocator()

# Small enough that every sub-network runs in milliseconds.
TINY = NetworkConfig(
    resolution=16,
    embedding_spatial=4,
    embedding_channels=4,
    noise_dim=8,
    base_channels=4,
    generator_seed_spatial=2,
    denoiser_downsample=4,
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_cfg():
    return TINY


@pytest.fixture
def tiny_model():
    return AEGAN(TINY, seed=0)


@pytest.fixture(scope="session")
def desk_cfg():
    return NetworkConfig.desk()


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Criterion number -> (passed, detail); echoed in the terminal summary."""
    return request.config.stash.setdefault(ACCEPTANCE_KEY, {})


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
