import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from brcdr.sim_core import ctle_shape, lossy_channel  # noqa: E402


@pytest.fixture(scope="session")
def lane0_sbr():
    """Asymmetric 15 dB channel used for lock-point and eye-climbing checks."""
    return ctle_shape(lossy_channel(15, pole_ratio=8), 6e9, 30e9, 40e9)


@pytest.fixture(scope="session")
def late_apex_sbr():
    """20 dB channel with a full DFE tap whose VEM apex lies after the MM crossing."""
    return ctle_shape(lossy_channel(20, pole_ratio=8), 4e9, 8e9, 40e9)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
