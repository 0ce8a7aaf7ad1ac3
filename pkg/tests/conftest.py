import numpy as np
import pytest

from fbx.antisym import make_antisym_z, make_parallel_bsc
from fbx.channel import solve_caid


@pytest.fixture(scope="session")
def bsc_pair():
    return make_parallel_bsc(0.05, 0.10)


@pytest.fixture(scope="session")
def bsc_analysis(bsc_pair):
    return solve_caid(bsc_pair)


@pytest.fixture(scope="session")
def z_pair():
    return make_antisym_z(0.3)


@pytest.fixture(scope="session")
def z_analysis(z_pair):
    return solve_caid(z_pair)


def h2(p):
    """Binary entropy in bits, written out directly as an oracle."""
    if p in (0.0, 1.0):
        return 0.0
    return -p * np.log2(p) - (1 - p) * np.log2(1 - p)


ACCEPTANCE_LINES = []


def record_acceptance(label, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'}  criterion {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
