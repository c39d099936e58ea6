"""Multi-order feature stacks, the stationary feature state and support sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError
from .graph import DegreeDelta, Graph, propagate_hop

BACKENDS = ("sgc", "s2gc", "sign")


def check_backend(backend: str) -> str:
    b = backend.lower()
    if b not in BACKENDS:
        raise InputError(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    return b


def feature_width(backend: str, f: int, order: int) -> int:
    """Classifier input width at ``order`` for a backend."""
    return (order + 1) * f if backend == "sign" else f


def order_features(backend: str, hops: Sequence[np.ndarray], order: int) -> np.ndarray:
    """Classifier input at ``order`` from propagated hops ``X^(0..order)``.

    ``sgc`` uses ``X^(order)``, ``s2gc`` the mean of ``X^(1..order)`` and
    ``sign`` the concatenation ``[X^(0) | ... | X^(order)]``.
    """
    if backend == "sgc":
        return hops[order]
    if backend == "s2gc":
        acc = np.zeros_like(hops[0])
        for t in range(1, order + 1):
            acc = acc + hops[t]
        return acc / order
    if backend == "sign":
        return np.hstack(list(hops[: order + 1]))
    raise InputError(f"unknown backend {backend!r}")


def _check_finite(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise InputError(f"feature matrix must be 2-D, got shape {x.shape}")
    if not np.isfinite(x).all():
        raise InputError("feature matrix contains NaN or Inf")
    return x


@dataclass(frozen=True)
class PropagatedStack:
    backend: str
    r: float
    hops: tuple[np.ndarray, ...]  # X^(0..k)

    @property
    def k(self) -> int:
        return len(self.hops) - 1

    @property
    def f(self) -> int:
        return self.hops[0].shape[1]

    def features(self, order: int, rows: np.ndarray | None = None) -> np.ndarray:
        if not 1 <= order <= self.k:
            raise InputError(f"order {order} not in stack (k={self.k})")
        hops = self.hops if rows is None else [h[rows] for h in self.hops]
        return order_features(self.backend, hops, order)


def precompute_stack(g: Graph, r: float, x: np.ndarray, k: int, backend: str = "sgc") -> PropagatedStack:
    backend = check_backend(backend)
    if k < 1:
        raise InputError(f"propagation order must be >= 1, got {k}")
    x = _check_finite(x)
    if x.shape[0] != g.n:
        raise InputError(f"feature rows {x.shape[0]} != node count {g.n}")
    hops = [x]
    for _ in range(k):
        hops.append(propagate_hop(g, r, hops[-1]))
    return PropagatedStack(backend, r, tuple(hops))


@dataclass(frozen=True)
class StationarySummary:
    """Per-component rank-1 factorisation of the stationary state.

    Node ``i`` in component ``c`` has stationary feature
    ``(d_i + 1)^r / M_c * S_c`` with ``M_c = 2 m_c + n_c`` and
    ``S_c = sum_j (d_j + 1)^(1 - r) x_j``.
    """

    r: float
    labels: np.ndarray
    mass: np.ndarray
    weighted_sum: np.ndarray
    coef: np.ndarray

    @property
    def n(self) -> int:
        return len(self.labels)

    def rows(self, nodes: np.ndarray) -> np.ndarray:
        nodes = np.asarray(nodes, dtype=np.int64)
        if len(nodes) and (nodes.min() < 0 or nodes.max() >= self.n):
            raise InputError(f"node outside summary (n={self.n})")
        c = self.labels[nodes]
        return (self.coef[nodes] / self.mass[c])[:, None] * self.weighted_sum[c]


def stationary_summary(g: Graph, r: float, x: np.ndarray, comps=None) -> StationarySummary:
    x = _check_finite(x)
    if x.shape[0] != g.n:
        raise InputError(f"feature rows {x.shape[0]} != node count {g.n}")
    comps = g.components if comps is None else comps
    dt = g.degrees + 1.0
    s = np.zeros((comps.count, x.shape[1]))
    np.add.at(s, comps.labels, (dt ** (1.0 - r))[:, None] * x)
    return StationarySummary(r, comps.labels, comps.mass(), s, dt**r)


def stationary_state(s: StationarySummary, i: int) -> np.ndarray:
    if not 0 <= i < s.n:
        raise InputError(f"unknown node {i}")
    return s.rows(np.array([i]))[0]


def update_summary(s: StationarySummary, g: Graph, delta: DegreeDelta, x: np.ndarray) -> StationarySummary:
    """Fold a graph extension into the summary without a full recompute.

    ``g`` is the extended graph and ``x`` its full feature matrix (old rows
    first, then the rows of the new nodes).
    """
    if delta.n_before != s.n or delta.n_after != g.n:
        raise InputError(
            f"delta covers {delta.n_before}->{delta.n_after} nodes but summary has {s.n} and graph {g.n}"
        )
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != g.n:
        raise InputError(f"feature rows {x.shape[0]} != node count {g.n}")
    r = s.r
    comps = g.components
    new_labels = comps.labels
    old_to_new = np.empty(len(s.mass), dtype=np.int64)
    old_to_new[s.labels] = new_labels[: s.n]

    acc = np.zeros((comps.count, s.weighted_sum.shape[1]))
    np.add.at(acc, old_to_new, s.weighted_sum)
    for node, d_old, d_new in delta.changes:
        if g.degrees[node] != d_new:
            raise InputError(f"delta degree for node {node} does not match graph")
        acc[new_labels[node]] += ((d_new + 1.0) ** (1.0 - r) - (d_old + 1.0) ** (1.0 - r)) * x[node]
    fresh = np.arange(s.n, g.n)
    if len(fresh):
        w = (g.degrees[fresh] + 1.0) ** (1.0 - r)
        np.add.at(acc, new_labels[fresh], w[:, None] * x[fresh])
    return StationarySummary(r, new_labels, comps.mass(), acc, (g.degrees + 1.0) ** r)


def smoothness_distance(a: np.ndarray, b: np.ndarray, normalize: bool = False) -> np.ndarray | float:
    """l2 distance between propagated and stationary rows (row-wise for 2-D input)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"row shapes differ: {a.shape} vs {b.shape}")
    if normalize:
        a = _unit_rows(a)
        b = _unit_rows(b)
    diff = a - b
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


def _unit_rows(a: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(a, axis=-1, keepdims=True)
    return a / np.where(norm > 0, norm, 1.0)


@dataclass(frozen=True)
class SupportLayers:
    """``layers[l]`` holds the nodes whose ``X^(l)`` rows must be computed."""

    layers: tuple[np.ndarray, ...]

    @property
    def L(self) -> int:
        return len(self.layers) - 1

    def __getitem__(self, l: int) -> np.ndarray:
        return self.layers[l]


def expand(g: Graph, nodes: np.ndarray) -> np.ndarray:
    """``nodes`` together with all their neighbours, sorted."""
    mask = np.zeros(g.n, dtype=bool)
    mask[nodes] = True
    mask[g.adjacency[nodes].indices] = True
    return np.flatnonzero(mask)


def layered_support(g: Graph, batch, L: int) -> SupportLayers:
    batch = np.unique(np.asarray(batch, dtype=np.int64))
    if len(batch) == 0:
        raise InputError("empty batch")
    if L < 1:
        raise InputError(f"max order must be >= 1, got {L}")
    if batch[0] < 0 or batch[-1] >= g.n:
        raise InputError("batch node out of range")
    layers = [batch]
    for _ in range(L):
        prev = layers[-1]
        nxt = expand(g, prev)
        layers.append(prev if len(nxt) == len(prev) else nxt)
    return SupportLayers(tuple(reversed(layers)))

