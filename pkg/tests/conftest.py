import numpy as np
import pytest

from structplast.data import default_data_dir

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def mnist_dir():
    d = default_data_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found (set STRUCTPLAST_DATA or place them in data/mnist)")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
