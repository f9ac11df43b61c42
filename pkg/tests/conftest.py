import numpy as np
import pytest

from evspseg.events import EventStream


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def make_stream(rows, width=346, height=260, labels=None):
    """Stream from ``(t, x, y, p)`` tuples."""
    arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream.from_arrays(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height,
                                   labels=labels)


# criterion name -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(name, passed, detail=""):
    ACCEPTANCE[name] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
