import numpy as np
import pytest

ACCEPTANCE = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def record_acceptance():
    def record(criterion, passed, measured=""):
        ACCEPTANCE[criterion] = (passed, measured)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
        passed, measured = ACCEPTANCE[key]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {key}  {measured}")
