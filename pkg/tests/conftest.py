import numpy as np
import pytest

from crisloc.preprocess import survey
from crisloc.synth import make_scenario


@pytest.fixture(scope="session")
def scenario():
    return make_scenario(seed=0)


@pytest.fixture(scope="session")
def radio_map(scenario):
    return survey(scenario)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def record():
    """Store the one-line verdict of an acceptance criterion."""
    def _record(number: int, ok: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
