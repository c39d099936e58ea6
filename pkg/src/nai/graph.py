"""Undirected graph storage, inductive splits and the single-hop propagation kernel.

Self-loops are never stored. Every normalisation uses ``d_i + 1`` so the
self-loop of the augmented adjacency is implicit.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components as _cc

from .errors import InputError

log = logging.getLogger(__name__)

NORM_PRESETS = {
    "reverse-transition": 0.0,
    "symmetric": 0.5,
    "transition": 1.0,
}


def resolve_r(r: float | str) -> float:
    """Map a preset name or a number in [0, 1] to the convolution coefficient."""
    if isinstance(r, str):
        if r in NORM_PRESETS:
            return NORM_PRESETS[r]
        try:
            r = float(r)
        except ValueError:
            raise InputError(f"unknown normalisation {r!r}; presets are {sorted(NORM_PRESETS)}") from None
    r = float(r)
    if not 0.0 <= r <= 1.0:
        raise InputError(f"convolution coefficient r={r} outside [0, 1]")
    return r


@dataclass(frozen=True)
class ComponentLabeling:
    labels: np.ndarray  # component id per node, canonical: ordered by smallest member
    node_counts: np.ndarray
    edge_counts: np.ndarray

    @property
    def count(self) -> int:
        return len(self.node_counts)

    def mass(self) -> np.ndarray:
        """Per-component ``2 m_c + n_c``."""
        return 2.0 * self.edge_counts + self.node_counts


@dataclass(frozen=True)
class DegreeDelta:
    """Degree changes of pre-existing nodes produced by :func:`extend_graph`."""

    changes: tuple[tuple[int, int, int], ...]
    n_before: int
    n_after: int

    @property
    def nodes(self) -> np.ndarray:
        return np.array([c[0] for c in self.changes], dtype=np.int64)

    def __len__(self) -> int:
        return len(self.changes)


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    csr_offsets: np.ndarray
    csr_targets: np.ndarray
    self_loops_dropped: int = 0
    _components: ComponentLabeling | None = field(default=None, repr=False)

    @cached_property
    def degrees(self) -> np.ndarray:
        return np.diff(self.csr_offsets)

    @property
    def m(self) -> int:
        return int(len(self.csr_targets) // 2)

    @cached_property
    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(len(self.csr_targets), dtype=np.float64)
        return sp.csr_matrix((data, self.csr_targets, self.csr_offsets), shape=(self.n, self.n))

    @cached_property
    def components(self) -> ComponentLabeling:
        if self._components is not None:
            return self._components
        return connected_components(self)

    def neighbors(self, i: int) -> np.ndarray:
        return self.csr_targets[self.csr_offsets[i] : self.csr_offsets[i + 1]]

    def edge_array(self) -> np.ndarray:
        """Each undirected edge once, as ``(u, v)`` rows with ``u < v``."""
        src = np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)
        keep = src < self.csr_targets
        return np.stack([src[keep], self.csr_targets[keep]], axis=1)

    def check(self) -> None:
        """Assert structural invariants (symmetry, no loops, no duplicates)."""
        src = np.repeat(np.arange(self.n, dtype=np.int64), self.degrees)
        if (src == self.csr_targets).any():
            raise InputError("explicit self-loop stored")
        if (np.diff(src * max(self.n, 1) + self.csr_targets) <= 0).any():
            raise InputError("duplicate or unsorted edge stored")
        a = self.adjacency
        if (a != a.T).nnz:
            raise InputError("adjacency is not symmetric")


def _as_edges(edges) -> np.ndarray:
    e = np.asarray(edges, dtype=np.int64)
    if e.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if e.ndim != 2 or e.shape[1] != 2:
        raise InputError(f"edges must be (u, v) pairs, got shape {e.shape}")
    return e


def _from_pairs(e: np.ndarray, n: int, components: ComponentLabeling | None = None) -> Graph:
    loops = e[:, 0] == e[:, 1]
    n_loops = int(loops.sum())
    if n_loops:
        log.warning("dropped %d self-loop pair(s)", n_loops)
    e = e[~loops]
    both = np.concatenate([e, e[:, ::-1]])
    key = np.unique(both[:, 0] * n + both[:, 1]) if len(both) else np.zeros(0, dtype=np.int64)
    src, dst = np.divmod(key, n) if n else (key, key)
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])
    return Graph(n, offsets, dst.astype(np.int64), n_loops, components)


def build_graph(edges: Iterable[Sequence[int]] | np.ndarray, n: int) -> Graph:
    """Symmetric, deduplicated CSR graph on ``n`` nodes."""
    if n < 0:
        raise InputError(f"node count must be nonnegative, got {n}")
    e = _as_edges(edges)
    bad = np.flatnonzero((e < 0) | (e >= n))
    if len(bad):
        raise InputError(f"node id {int(e.flat[bad[0]])} out of range for n={n}")
    return _from_pairs(e, n)


def connected_components(g: Graph) -> ComponentLabeling:
    if g.n == 0:
        z = np.zeros(0, dtype=np.int64)
        return ComponentLabeling(z, z, z)
    _, raw = _cc(g.adjacency, directed=False)
    return _tally(raw, g.degrees)


def _tally(raw_labels: np.ndarray, degrees: np.ndarray) -> ComponentLabeling:
    # relabel so component ids follow the smallest member id
    uniq, first, inverse = np.unique(raw_labels, return_index=True, return_inverse=True)
    rank = np.empty(len(uniq), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(uniq))
    labels = rank[inverse.reshape(-1)]
    c = len(uniq)
    node_counts = np.bincount(labels, minlength=c).astype(np.int64)
    edge_counts = (np.bincount(labels, weights=degrees, minlength=c) // 2).astype(np.int64)
    return ComponentLabeling(labels, node_counts, edge_counts)


@dataclass(frozen=True)
class InductiveSplit:
    labeled_train: np.ndarray
    unlabeled_train: np.ndarray
    validation: np.ndarray
    test: np.ndarray

    SECTIONS = ("labeled_train", "unlabeled_train", "validation", "test")

    def __post_init__(self):
        for name in self.SECTIONS:
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))

    @property
    def train(self) -> np.ndarray:
        return np.sort(np.concatenate([self.labeled_train, self.unlabeled_train]))

    def validate(self, n: int) -> None:
        if len(self.labeled_train) == 0:
            raise InputError("labeled_train is empty")
        seen = np.concatenate([getattr(self, s) for s in self.SECTIONS])
        if len(seen) and (seen.min() < 0 or seen.max() >= n):
            raise InputError(f"split references node ids outside 0..{n - 1}")
        if len(np.unique(seen)) != len(seen):
            raise InputError("split sections overlap")


def induce_train_graph(g: Graph, split: InductiveSplit | np.ndarray) -> tuple[Graph, np.ndarray]:
    """Subgraph on the training nodes, keeping edges with both ends inside.

    Returns the subgraph and an ``old -> new`` id map (``-1`` for dropped nodes).
    New ids follow ascending old ids.
    """
    keep = split.train if isinstance(split, InductiveSplit) else np.unique(np.asarray(split, dtype=np.int64))
    if isinstance(split, InductiveSplit):
        split.validate(g.n)
    if len(keep) == 0:
        raise InputError("training node set is empty")
    old_to_new = np.full(g.n, -1, dtype=np.int64)
    old_to_new[keep] = np.arange(len(keep))
    e = g.edge_array()
    mapped = old_to_new[e]
    e = mapped[(mapped >= 0).all(axis=1)]
    return _from_pairs(e, len(keep)), old_to_new


class _UnionFind:
    def __init__(self, size: int):
        self.parent = np.arange(size, dtype=np.int64)

    def find(self, a: int) -> int:
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return int(root)

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[max(ra, rb)] = min(ra, rb)


def extend_graph(g: Graph, new_nodes: int, new_edges) -> tuple[Graph, DegreeDelta]:
    """Add ``new_nodes`` nodes (ids ``n..n+new_nodes-1``) and edges.

    Component labels of the result are merged from ``g``'s labels with a
    union-find over components, never recomputed from scratch.
    """
    if new_nodes < 0:
        raise InputError("new node count must be nonnegative")
    n_new = g.n + new_nodes
    e_new = _as_edges(new_edges)
    bad = np.flatnonzero((e_new < 0) | (e_new >= n_new))
    if len(bad):
        raise InputError(f"edge endpoint {int(e_new.flat[bad[0]])} out of range for n={n_new}")
    e_all = np.concatenate([g.edge_array(), e_new])
    out = _from_pairs(e_all, n_new)

    old_deg = g.degrees
    new_deg = out.degrees
    changed = np.flatnonzero(new_deg[: g.n] != old_deg)
    delta = DegreeDelta(
        tuple((int(i), int(old_deg[i]), int(new_deg[i])) for i in changed), g.n, n_new
    )

    comps = g.components
    c_old = comps.count
    uf = _UnionFind(c_old + new_nodes)

    def slot(u: int) -> int:
        return int(comps.labels[u]) if u < g.n else c_old + (u - g.n)

    for u, v in e_new:
        if u != v:
            uf.union(slot(int(u)), slot(int(v)))
    roots = np.array([uf.find(s) for s in range(c_old + new_nodes)], dtype=np.int64)
    provisional = np.concatenate([roots[comps.labels], roots[c_old:]]) if n_new else roots
    merged = _tally(provisional, new_deg)
    return Graph(n_new, out.csr_offsets, out.csr_targets, out.self_loops_dropped, merged), delta


def hop_scales(g: Graph, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Left ``(d+1)^(r-1)`` and right ``(d+1)^(-r)`` diagonal scalings."""
    dt = g.degrees + 1.0
    return dt ** (r - 1.0), dt ** (-r)


def propagate_hop(g: Graph, r: float, x: np.ndarray, support: np.ndarray | None = None) -> np.ndarray:
    """One application of ``D^(r-1) (A + I) D^(-r)`` to ``x``.

    With ``support`` only those rows are computed; other rows of the result
    are zero and must not be relied on.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != g.n:
        raise InputError(f"feature rows {x.shape[0] if x.ndim else 0} != node count {g.n}")
    left, right = hop_scales(g, r)
    xs = x * right[:, None]
    if support is None:
        return left[:, None] * (xs + g.adjacency @ xs)
    rows = np.asarray(support, dtype=np.int64)
    out = np.zeros_like(xs)
    out[rows] = left[rows, None] * (xs[rows] + g.adjacency[rows] @ xs)
    return out


def read_edge_list(path: str | Path) -> np.ndarray:
    """Parse ``u v`` lines; ``#`` lines are comments."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            parts = s.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'u v', got {s!r}")
            try:
                rows.append((int(parts[0]), int(parts[1])))
            except ValueError:
                raise InputError(f"{path}:{lineno}: non-integer node id in {s!r}") from None
    return _as_edges(rows)


def write_edge_list(g: Graph, path: str | Path) -> None:
    e = g.edge_array()
    with open(path, "w") as fh:
        fh.write(f"# n={g.n} m={g.m}\n")
        for u, v in e:
            fh.write(f"{u} {v}\n")
