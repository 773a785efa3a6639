import sys
from pathlib import Path

import numpy as np
import pytest

from bayeseg import tensor

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(autouse=True)
def _debug_checks():
    tensor.set_debug(True)
    yield
    tensor.set_debug(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    """Remember one acceptance criterion outcome for the end-of-run summary."""
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
