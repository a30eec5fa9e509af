from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kidney_incentives.harness import shipped_table
from kidney_incentives.mechanisms import MechanismId

settings.register_profile(
    "default", deadline=None, suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large]
)
settings.load_profile("default")

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def record_acceptance(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
    print(ACCEPTANCE_LINES[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def shipped_tables():
    return {m: shipped_table(m) for m in (MechanismId.M0, MechanismId.M1)}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
