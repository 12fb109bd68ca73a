import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from fsmc_aloha.channel import load_table1  # noqa: E402
from fsmc_aloha.dynamics import SystemParams  # noqa: E402

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


@pytest.fixture(scope="session")
def table1():
    return load_table1()


@pytest.fixture(scope="session")
def user1(table1):
    return table1["user1"]


@pytest.fixture(scope="session")
def user2(table1):
    return table1["user2"]


@pytest.fixture
def fig2_params():
    return SystemParams(tau=1e-3, W=1e3, N0=1e-3, lam=1.0, mean_packet_bits=1e3, N=5, K=5)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
