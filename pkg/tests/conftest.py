import sys
from pathlib import Path

import pytest
from hypothesis import settings

DATA = Path(__file__).resolve().parents[1] / "src" / "haemoinfer" / "data"
DEMO_NETWORK = DATA / "demo_network.json"
DEMO_INFLOW = DATA / "demo_inflow.csv"
DEMO_CONFIG = DATA / "demo_config.json"

# the tests directory holds shared helpers imported as plain modules
sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None)
settings.load_profile("default")


@pytest.fixture(scope="session")
def demo_objective():
    """Noise-free demo objective, its generating theta and the parameter space."""
    from demo import TRUTH_5D, demo_objective

    obj, space = demo_objective()
    return obj, TRUTH_5D.copy(), space


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(LINES):
            terminalreporter.write_line(line)
