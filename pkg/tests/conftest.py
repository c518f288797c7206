from pathlib import Path

import numpy as np
import pytest

from snia.graph import Graph

ROOT = Path(__file__).resolve().parents[1]
CORA = ROOT / "data" / "cora"
CITESEER = ROOT / "data" / "citeseer"


def random_graph(rng, n, F, Y, p=0.3, active=3):
    upper = np.triu(rng.random((n, n)) < p, k=1)
    edges = np.argwhere(upper)
    pairs = [(v, int(f)) for v in range(n)
             for f in rng.choice(F, size=min(active, F), replace=False)]
    labels = rng.integers(Y, size=n)
    return Graph.from_edges(n, edges, np.array(pairs).reshape(-1, 2), labels, F, Y)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def path3():
    return Graph.from_edges(3, [(0, 1), (1, 2)], [(0, 0), (1, 1), (2, 0), (2, 2)],
                            [0, 1, 0], 3, 2)


# one line per acceptance criterion, echoed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
