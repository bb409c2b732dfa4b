import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adaptrec.graph import BipartiteGraph  # noqa: E402


def random_bipartite(rng, max_users=6, max_items=6, p=None):
    n_u = int(rng.integers(1, max_users + 1))
    n_i = int(rng.integers(1, max_items + 1))
    p = rng.uniform(0.1, 0.9) if p is None else p
    mask = rng.random((n_u, n_i)) < p
    edges = [(int(u), int(i)) for u, i in zip(*np.nonzero(mask))]
    if not edges:
        edges = [(0, 0)]
    return BipartiteGraph.from_edges(edges, n_u, n_i)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def k22():
    return BipartiteGraph.from_edges([(0, 0), (0, 1), (1, 0), (1, 1)])


@pytest.fixture
def k23():
    return BipartiteGraph.from_edges([(u, i) for u in range(2) for i in range(3)])


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
