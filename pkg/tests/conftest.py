import numpy as np
import pytest

from revcol.tensor import set_precision


@pytest.fixture(autouse=True)
def double_precision():
    set_precision("f64")
    yield
    set_precision("f64")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_LINES

    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
