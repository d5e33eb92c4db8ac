import numpy as np
import pytest

from morpmamba.ingest import synth_cube

ACCEPTANCE: dict[int, tuple[str, str]] = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_cube():
    return synth_cube(32, 32, 16, 4, 0.05, seed=7)


@pytest.fixture
def record():
    """Record an acceptance-criterion outcome for the terminal summary."""

    def _record(number: int, passed: bool, detail: str, soft: bool = False) -> bool:
        status = "PASS" if passed else ("WARN" if soft else "FAIL")
        ACCEPTANCE[number] = (status, detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {status}  {detail}")
