import numpy as np
import pytest

from qrheston.kernel import build_kernel, fit_kernel
from qrheston.model import ModelParams


@pytest.fixture(scope="session")
def kernel10():
    return fit_kernel(0.51, 10, 0.1)


@pytest.fixture(scope="session")
def kernel3():
    return build_kernel(0.51, 3, 8.0)


@pytest.fixture
def hedge_params():
    """The hedging example parameter set: lambda, eta, a, b, c."""
    return ModelParams(1.0, 1.2, 0.35, 0.2, 0.0025)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line for an acceptance criterion; returns the pass flag."""

    def record(number: int, title: str, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {title}: {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
