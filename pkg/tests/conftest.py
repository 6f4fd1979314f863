import os

import numpy as np
import pytest

os.environ.setdefault("MULTIPRIOR_BACKEND", "auto")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_phantom_config():
    from multiprior.phantom import PhantomConfig
    return PhantomConfig(edge=48)


@pytest.fixture(scope="session")
def small_tpm(small_phantom_config):
    from multiprior.phantom import population_tpm
    return population_tpm(small_phantom_config, 6, seed=3)


def pytest_terminal_summary(terminalreporter):
    from _report import LINES
    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
