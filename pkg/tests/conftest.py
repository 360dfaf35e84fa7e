import numpy as np
import pytest

SEED = 20260814

_CRITERION_LINES: list[tuple[int, str]] = []


@pytest.fixture
def rng() -> np.random.Generator:
    """Fresh deterministic generator per test."""
    return np.random.default_rng(SEED)


def record_criterion(number: int, ok: bool, detail: str) -> None:
    """Collect one acceptance-criterion verdict for the end-of-run summary."""
    status = "PASS" if ok else "FAIL"
    _CRITERION_LINES.append((number, f"criterion {number}: {status} - {detail}"))


def pytest_terminal_summary(terminalreporter):
    if _CRITERION_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERION_LINES):
            terminalreporter.line(line)
