import time
from contextlib import contextmanager

import pytest

# criterion number -> (title, passed, seconds, note)
CRITERIA = {}


class Criterion:
    def __init__(self, number: int, title: str, budget_s: float):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.note = ""
        self.charged = 0.0

    def charge(self, seconds: float) -> None:
        """Count work done outside the timed block (a shared fixture)."""
        self.charged += seconds


@contextmanager
def criterion(number: int, title: str, budget_s: float):
    c = Criterion(number, title, budget_s)
    t0 = time.perf_counter()
    ok = False
    try:
        yield c
        ok = True
    finally:
        elapsed = time.perf_counter() - t0 + c.charged
        within = elapsed < budget_s
        CRITERIA[number] = (title, ok and within, elapsed, c.note if within else
                            f"{c.note} over budget {budget_s:.0f} s".strip())
    assert elapsed < budget_s, f"criterion {number} took {elapsed:.1f} s, budget {budget_s:.0f} s"


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, secs, note = CRITERIA[n]
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  ({secs:.1f} s)"
        terminalreporter.write_line(line + (f"  {note}" if note else ""))


@pytest.fixture
def record():
    return criterion
