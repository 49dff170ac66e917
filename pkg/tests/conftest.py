import numpy as np
import pytest

from bivit import bitops


def naive_int_matmul(a, b):
    """Triple-loop integer product of two +1/-1 matrices (rows . rows)."""
    a = np.asarray(a).astype(int).tolist()
    b = np.asarray(b).astype(int).tolist()
    return np.array([[sum(x * y for x, y in zip(r, c)) for c in b] for r in a], dtype=np.int64)


def random_signs(rng, shape):
    return rng.choice((-1.0, 1.0), size=shape)


@pytest.fixture(params=bitops.available_backends())
def backend(request):
    saved = bitops.get_backend()
    bitops.set_backend(request.param)
    yield request.param
    bitops.set_backend(saved)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def report(name, ok, detail=""):
    """Record and print one acceptance verdict, then fail the test if it did not hold."""
    line = f"[{'PASS' if ok else 'FAIL'}] {name}" + (f": {detail}" if detail else "")
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
