import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_REPORT: dict[int, str] = {}


@pytest.fixture
def verdict():
    """``verdict(n, name, ok, detail)`` records one acceptance line and asserts ``ok``."""

    def record(n, name, ok, detail=""):
        _REPORT[n] = f"[{n:2d}] {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        print(_REPORT[n])
        assert ok, _REPORT[n]

    return record


def pytest_terminal_summary(terminalreporter):
    if _REPORT:
        terminalreporter.section("acceptance criteria")
        for n in sorted(_REPORT):
            terminalreporter.write_line(_REPORT[n])
