import numpy as np
import pytest
from hypothesis import settings

from permfilter.io import mnist_available

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

requires_mnist = pytest.mark.skipif(
    not mnist_available(), reason="MNIST not cached; run scripts/fetch_mnist.py"
)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
