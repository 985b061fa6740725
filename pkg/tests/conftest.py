import numpy as np
import pytest

from dsi.nn import rng_stream


@pytest.fixture
def rng():
    return rng_stream(1234, 0)


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# One line per acceptance criterion, printed after the run so it lands in the log.
ACCEPTANCE_LINES = {}


def record(criterion, ok, detail, seconds=None, budget=None):
    timing = ""
    if seconds is not None:
        timing = f" [{seconds:.1f}s" + (f", budget {budget}" if budget else "") + "]"
    ACCEPTANCE_LINES[criterion] = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}{timing}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
