import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from semloc.synth import WorldSpec, default_camera, generate_world  # noqa: E402


@pytest.fixture(scope="session")
def small_world():
    spec = WorldSpec(extent=135.0, block=45.0, buildings=20, trees=24, cars=8, fences=8, signs=8, rng_seed=1)
    return generate_world(spec)


@pytest.fixture(scope="session")
def camera():
    return default_camera(80, 60, fx=50.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "REPORT", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
