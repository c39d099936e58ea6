import numpy as np
import pytest

from nai.datasets import PRESETS, generate_sbm
from nai.graph import build_graph, hop_scales


def random_connected_graph(rng, n, p=0.15):
    """Erdos-Renyi edges plus a random spanning tree so the graph is connected."""
    order = rng.permutation(n)
    tree = [(order[i], order[rng.integers(0, i)]) for i in range(1, n)]
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    extra = list(zip(iu[keep], ju[keep]))
    return build_graph(np.array(tree + extra, dtype=np.int64).reshape(-1, 2), n)


def random_graph(rng, n, p=0.15):
    """Possibly disconnected, possibly with isolated nodes."""
    iu, ju = np.triu_indices(n, 1)
    keep = rng.random(len(iu)) < p
    return build_graph(np.stack([iu[keep], ju[keep]], axis=1), n)


def dense_operator(g, r):
    """Dense propagation matrix built entry by entry."""
    left, right = hop_scales(g, r)
    a = g.adjacency.toarray() + np.eye(g.n)
    return left[:, None] * a * right[None, :]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def tiny_bundle():
    return generate_sbm(PRESETS["sbm-tiny"], seed=3)


@pytest.fixture(scope="session")
def small_bundle():
    return generate_sbm(PRESETS["sbm-small"], seed=1)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail, status=None):
    """Print one pass/fail line and keep it for the end-of-run summary."""
    status = status or ("PASS" if ok else "FAIL")
    line = f"criterion {number} {status}  {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
