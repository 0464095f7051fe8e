import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# Four flows, two features, Q=2, alpha=0.5: the hand-worked instance.
MICRO_ROWS = np.array([[1, 1], [1, 1], [1, 2], [2, 1]])


@pytest.fixture
def micro_rows():
    return MICRO_ROWS.copy()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rows(rng, n, m, Q):
    """Random symbols with uneven per-feature marginals and some correlation."""
    X = np.empty((n, m), dtype=np.int64)
    for i in range(m):
        p = rng.dirichlet(np.ones(Q))
        X[:, i] = rng.choice(np.arange(1, Q + 1), size=n, p=p)
    if m > 1:
        copy = rng.random(n) < 0.3
        X[copy, 1] = X[copy, 0]
    return X


# One line per acceptance criterion, printed after the run so the verdicts
# are visible without -s.
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    def record(number, passed, detail):
        line = f"[criterion {number}] {'PASS' if passed else 'FAIL'}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
