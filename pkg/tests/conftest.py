import time
from contextlib import contextmanager

import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Context manager that times a block and records one PASS/FAIL line."""
    lines = request.config.stash.setdefault(_LINES, [])

    @contextmanager
    def run(number: int, title: str, budget_s: float, already_spent_s: float = 0.0):
        start = time.perf_counter()
        ok = False
        elapsed = already_spent_s
        try:
            yield
            elapsed = already_spent_s + time.perf_counter() - start
            assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:g}s"
            ok = True
        finally:
            elapsed = already_spent_s + time.perf_counter() - start
            line = f"{'PASS' if ok else 'FAIL'}  criterion {number}: {title} ({elapsed:.1f}s of {budget_s:g}s)"
            lines.append((number, line))
            print("\n" + line)

    return run


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
