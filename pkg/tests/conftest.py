from pathlib import Path

import numpy as np
import pytest

from distgeom.chart import Chart, TensorField

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def chart2():
    return Chart.unit(2)


@pytest.fixture
def chart3():
    return Chart.unit(3)


def scalar_field(func, dim=2, chart=None):
    return TensorField((0, 0), dim, func, chart=chart)


@pytest.fixture
def quadratic():
    """``1 + x0 + x1^2 - x0 x1``: reproduced exactly by kernels with two vanishing moments."""
    return scalar_field(lambda p: 1 + p[:, 0] + p[:, 1] ** 2 - p[:, 0] * p[:, 1])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        passed, text = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{key}] {'PASS' if passed else 'FAIL'} {text}")
