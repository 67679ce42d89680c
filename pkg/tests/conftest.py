import numpy as np
import pytest

from protoclus.numerics import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def unit_cols(rng, d, n):
    X = rng.standard_normal((d, n))
    return X / np.linalg.norm(X, axis=0, keepdims=True)


def unit_rows(rng, n, d):
    return unit_cols(rng, d, n).T


# PASS/FAIL lines from the acceptance suite, shown after the test summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
