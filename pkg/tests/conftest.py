import numpy as np
import pytest

from d2net import numerics as nm


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    """Run the test with float64 as the default tensor dtype."""
    prev = nm.get_default_dtype()
    nm.set_default_dtype(np.float64)
    yield
    nm.set_default_dtype(prev)


def pytest_terminal_summary(terminalreporter):
    from _acceptance import RESULTS
    if RESULTS:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(RESULTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
