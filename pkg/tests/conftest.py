import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from oracles import ACCEPTANCE_LINES  # noqa: E402

from rkalign.policy import FeatureMap, init_policy  # noqa: E402


@pytest.fixture
def small_policy():
    fmap = FeatureMap(6, dim=8, window=2, seed=3)
    return init_policy(fmap, scale=1.0, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
