import numpy as np
import pytest

from mimo_uplink.grid import SystemConfig


@pytest.fixture(scope="session")
def cfg():
    return SystemConfig()


@pytest.fixture(scope="session")
def toy_cfg():
    # one window covers the whole band: K = 3 pilots per UE
    return SystemConfig(R=4, S=12, S_active=4, N=36, N_FFT=64, tap_delays=(0, 1, 2), tap_powers_db=(0, -3, -6))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
