import contextlib
import time

import pytest

ACCEPTANCE: list[tuple[str, str, str]] = []


class Criterion:
    def __init__(self, name: str, budget_s: float | None):
        self.name = name
        self.budget_s = budget_s
        self.details: list[str] = []

    def note(self, text: str) -> None:
        self.details.append(text)


@pytest.fixture
def criterion():
    """Run one acceptance criterion, enforce its time budget and record PASS/FAIL."""

    @contextlib.contextmanager
    def run(name: str, budget_s: float | None = None):
        c = Criterion(name, budget_s)
        start = time.perf_counter()
        try:
            yield c
            elapsed = time.perf_counter() - start
            c.note(f"{elapsed:.2f}s" + (f" of {budget_s:g}s budget" if budget_s else ""))
            if budget_s is not None:
                assert elapsed < budget_s, f"{name}: took {elapsed:.2f}s, budget {budget_s}s"
        except BaseException as exc:
            ACCEPTANCE.append(("FAIL", name, f"{type(exc).__name__}: {exc}"[:300]))
            raise
        ACCEPTANCE.append(("PASS", name, "; ".join(c.details)))

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for status, name, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status} {name}: {detail}")
