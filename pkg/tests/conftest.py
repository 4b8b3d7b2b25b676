import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dtpauth.waveform import make_reference, scheme_by_name, srrc_design  # noqa: E402


@pytest.fixture(scope="session")
def filt():
    return srrc_design(8, 0.35, 10)


@pytest.fixture(scope="session")
def ref_qam4(filt):
    return make_reference(scheme_by_name("qam4"), 500, 1, filt)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


CRITERIA: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, text = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {text}")
