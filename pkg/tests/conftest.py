import contextlib

import pytest

# criterion number -> (passed, detail), filled in by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, detail: str = ""):
    """Record a pass/fail line for an acceptance criterion; failures still raise."""
    notes: list[str] = []
    try:
        yield notes
    except BaseException as err:
        ACCEPTANCE[number] = (False, "; ".join(notes + [f"{type(err).__name__}: {err}".splitlines()[0]]))
        raise
    ACCEPTANCE[number] = (True, "; ".join(notes) or detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def record_criterion():
    return criterion
