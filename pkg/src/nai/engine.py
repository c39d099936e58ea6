"""Node-adaptive propagation: batched inductive inference with per-node exits."""

from __future__ import annotations

import csv
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .distill import ClassifierBank
from .errors import ConfigError, InputError
from .graph import Graph, hop_scales
from .metering import MacsBreakdown, MacsTrace, meter_macs
from .propagation import StationarySummary, layered_support, smoothness_distance
from .training import tempered_softmax


@dataclass(frozen=True)
class NapConfig:
    ts: float
    tmin: int
    tmax: int
    batch_size: int = 500
    normalize: bool = False
    # rebuild support layers once the active set shrank by this fraction
    rebuild_shrink: float = 0.0

    def validate(self, k: int) -> None:
        if not 1 <= self.tmin <= self.tmax:
            raise ConfigError(f"need 1 <= tmin <= tmax, got tmin={self.tmin} tmax={self.tmax}")
        if self.tmax > k:
            raise ConfigError(f"tmax={self.tmax} exceeds bank order k={k}")
        if not self.ts >= 0:
            raise ConfigError(f"threshold ts must be nonnegative, got {self.ts}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.rebuild_shrink < 1.0:
            raise ConfigError("rebuild_shrink must lie in [0, 1)")


@dataclass(frozen=True)
class ExitRecord:
    node: int
    order: int
    distance: float | None  # None when the exit was forced at tmax
    predicted: int
    confidence: float


@dataclass
class InferenceOutcome:
    nodes: np.ndarray
    predictions: np.ndarray
    records: list[ExitRecord]
    macs: MacsBreakdown
    total_seconds: float = 0.0
    fp_seconds: float = 0.0
    sampling_seconds: float = 0.0
    trace: MacsTrace = field(default_factory=MacsTrace, repr=False)

    @property
    def exit_orders(self) -> np.ndarray:
        return np.array([r.order for r in self.records], dtype=np.int64)

    def histogram(self, k: int) -> list[int]:
        return exit_histogram(self.records, k)

    def accuracy(self, labels: np.ndarray) -> float:
        return float(np.mean(self.predictions == np.asarray(labels)[self.nodes]))


def exit_histogram(records: Iterable[ExitRecord], k: int) -> list[int]:
    counts = [0] * k
    for rec in records:
        counts[rec.order - 1] += 1
    return counts


def _classify(bank: ClassifierBank, order: int, rows: np.ndarray, trace: MacsTrace):
    c = bank[order]
    trace.classification(len(rows), c.layer_shapes)
    probs = tempered_softmax(c.forward(rows)[0])
    return probs.argmax(axis=1), probs.max(axis=1)


class _BatchFeatures:
    """Per-target classifier inputs built up hop by hop for one batch."""

    def __init__(self, backend: str, x0: np.ndarray):
        self.backend = backend
        self.hops = [x0]
        self.running = np.zeros_like(x0)

    def push(self, rows: np.ndarray, trace: MacsTrace, active: np.ndarray) -> None:
        self.hops.append(rows)
        if self.backend == "s2gc":
            self.running = self.running + rows
            trace.average(len(active), rows.shape[1])

    def at(self, order: int, pos: np.ndarray) -> np.ndarray:
        if self.backend == "sgc":
            return self.hops[order][pos]
        if self.backend == "s2gc":
            return self.running[pos] / order
        return np.hstack([h[pos] for h in self.hops[: order + 1]])


def infer_batch(
    g: Graph,
    x: np.ndarray,
    bank: ClassifierBank,
    summary: StationarySummary | None,
    cfg: NapConfig,
    batch: Sequence[int],
    adaptive: bool = True,
) -> InferenceOutcome:
    """Run the exit procedure on one batch.

    ``adaptive=False`` gives vanilla fixed-order inference at ``cfg.tmax``:
    no stationary state, no distances.
    """
    cfg.validate(bank.k)
    t_start = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != g.n:
        raise InputError(f"feature rows {x.shape[0]} != node count {g.n}")
    batch = np.asarray(batch, dtype=np.int64)
    if len(batch) == 0:
        raise InputError("empty batch")
    if batch.min() < 0 or batch.max() >= g.n:
        raise InputError("batch node outside graph")
    if len(np.unique(batch)) != len(batch):
        raise InputError("batch contains duplicate nodes")
    if adaptive and summary is None:
        raise InputError("adaptive inference needs a stationary summary")
    if adaptive and summary.n != g.n:
        raise InputError(f"summary covers {summary.n} nodes but graph has {g.n}")

    f = x.shape[1]
    L = cfg.tmax
    trace = MacsTrace()
    fp = 0.0
    left, right = hop_scales(g, bank_r(bank, summary))
    adj = g.adjacency
    deg = g.degrees

    checking = adaptive and cfg.tmin < L
    if adaptive:
        stationary = summary.rows(batch)
        trace.stationary(len(batch), f)

    t0 = time.perf_counter()
    layers = list(layered_support(g, batch, L).layers)
    sampling = time.perf_counter() - t0
    built_for = len(batch)

    feats = _BatchFeatures(bank.backend, x[batch])
    active = np.arange(len(batch))
    pred = np.empty(len(batch), dtype=np.int64)
    conf = np.empty(len(batch))
    order = np.empty(len(batch), dtype=np.int64)
    dist = np.full(len(batch), np.nan)

    cur = x
    for l in range(1, L + 1):
        t0 = time.perf_counter()
        out_rows = layers[l] if l < L else np.sort(batch[active])
        xs = cur * right[:, None]
        nxt = np.zeros_like(cur)
        nxt[out_rows] = left[out_rows, None] * (xs[out_rows] + adj[out_rows] @ xs)
        trace.propagation(deg[out_rows], f)
        cur = nxt
        feats.push(cur[batch], trace, active)
        fp += time.perf_counter() - t0
        if l < cfg.tmin:
            continue
        if l < L:
            if not checking:
                continue
            t0 = time.perf_counter()
            d = smoothness_distance(cur[batch[active]], stationary[active], cfg.normalize)
            trace.distance(len(active), f)
            fp += time.perf_counter() - t0
            leave = d < cfg.ts
            if leave.any():
                pos = active[leave]
                pred[pos], conf[pos] = _classify(bank, l, feats.at(l, pos), trace)
                order[pos] = l
                dist[pos] = d[leave]
                active = active[~leave]
                if len(active) == 0:
                    break
                if len(active) <= (1.0 - cfg.rebuild_shrink) * built_for:
                    t0 = time.perf_counter()
                    fresh = layered_support(g, batch[active], L - l).layers
                    layers[l:] = fresh
                    sampling += time.perf_counter() - t0
                    built_for = len(active)
        else:
            pred[active], conf[active] = _classify(bank, L, feats.at(L, active), trace)
            order[active] = L

    records = [
        ExitRecord(int(batch[i]), int(order[i]), None if np.isnan(dist[i]) else float(dist[i]),
                   int(pred[i]), float(conf[i]))
        for i in range(len(batch))
    ]
    total = time.perf_counter() - t_start
    return InferenceOutcome(batch, pred, records, meter_macs(trace, len(batch)), total, fp, sampling, trace)


def bank_r(bank: ClassifierBank, summary: StationarySummary | None) -> float:
    if summary is not None:
        return summary.r
    if "r" in bank.meta:
        return float(bank.meta["r"])
    raise ConfigError("convolution coefficient unknown: pass a summary or record 'r' in the bank")


def merge_outcomes(parts: Sequence[InferenceOutcome], trace: MacsTrace | None = None) -> InferenceOutcome:
    """Concatenate batch outcomes; ``trace`` holds extra events recorded outside any batch."""
    trace = MacsTrace() if trace is None else trace
    for p in parts:
        trace.extend(p.trace)
    nodes = np.concatenate([p.nodes for p in parts])
    return InferenceOutcome(
        nodes,
        np.concatenate([p.predictions for p in parts]),
        [r for p in parts for r in p.records],
        meter_macs(trace, len(nodes)),
        sum(p.total_seconds for p in parts),
        sum(p.fp_seconds for p in parts),
        sum(p.sampling_seconds for p in parts),
        trace,
    )


def infer(
    g: Graph,
    x: np.ndarray,
    bank: ClassifierBank,
    summary: StationarySummary | None,
    cfg: NapConfig,
    nodes: Sequence[int],
    adaptive: bool = True,
) -> InferenceOutcome:
    """Process ``nodes`` sequentially in batches of ``cfg.batch_size``.

    The one-time cost of the stationary summary is recorded on its own
    amortised line (it is not part of the MACs total).
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise InputError("no nodes to infer")
    parts = [
        infer_batch(g, x, bank, summary, cfg, nodes[i : i + cfg.batch_size], adaptive)
        for i in range(0, len(nodes), cfg.batch_size)
    ]
    trace = MacsTrace()
    if adaptive and summary is not None:
        trace.summary(summary.n, np.shape(x)[1])
    return merge_outcomes(parts, trace)


def vanilla_infer(g: Graph, x: np.ndarray, bank: ClassifierBank, r: float, nodes: Sequence[int],
                  k: int | None = None, batch_size: int = 500) -> InferenceOutcome:
    """Fixed-order inference with ``f^(k)`` over the same supporting-node scheme."""
    k = bank.k if k is None else k
    b = ClassifierBank(bank.backend, bank.classifiers, meta={**bank.meta, "r": repr(r)})
    return infer(g, x, b, None, NapConfig(0.0, k, k, batch_size), nodes, adaptive=False)


@dataclass(frozen=True)
class Candidate:
    ts: float
    tmin: int
    tmax: int
    accuracy: float
    macs: MacsBreakdown
    histogram: tuple[int, ...]
    seconds: float

    @property
    def fp_macs(self) -> int:
        return self.macs.fp

    def sort_key(self):
        return (-self.accuracy, self.macs.fp, self.tmax, -self.ts)


def make_grid(ts_values: Iterable[float], tmin_values: Iterable[int], tmax_values: Iterable[int]):
    """All ``(ts, tmin, tmax)`` combinations with ``tmin <= tmax``."""
    return [(float(ts), int(a), int(b)) for ts, a, b in itertools.product(ts_values, tmin_values, tmax_values)
            if a <= b]


def sweep(
    g: Graph,
    x: np.ndarray,
    bank: ClassifierBank,
    summary: StationarySummary,
    grid: Sequence[tuple[float, int, int]],
    nodes: Sequence[int],
    labels: np.ndarray,
    batch_size: int = 500,
    max_fp_macs: float | None = None,
    max_macs: float | None = None,
    max_seconds: float | None = None,
    normalize: bool = False,
) -> list[Candidate]:
    """Evaluate every grid point on labelled ``nodes``; best accuracy first.

    Ties go to fewer feature-processing MACs, then smaller ``tmax``, then
    larger ``ts``. Budgets are totals over ``nodes``.
    """
    if len(grid) == 0:
        raise InputError("empty threshold grid")
    out = []
    for ts, tmin, tmax in grid:
        res = infer(g, x, bank, summary, NapConfig(ts, tmin, tmax, batch_size, normalize), nodes)
        cand = Candidate(ts, tmin, tmax, res.accuracy(labels), res.macs, tuple(res.histogram(bank.k)),
                         res.total_seconds)
        if max_fp_macs is not None and cand.macs.fp > max_fp_macs:
            continue
        if max_macs is not None and cand.macs.total > max_macs:
            continue
        if max_seconds is not None and cand.seconds > max_seconds:
            continue
        out.append(cand)
    return sorted(out, key=Candidate.sort_key)


def dominates(a: Candidate, b: Candidate) -> bool:
    return (a.accuracy >= b.accuracy and a.fp_macs <= b.fp_macs
            and (a.accuracy > b.accuracy or a.fp_macs < b.fp_macs))


def pareto_front(candidates: Sequence[Candidate]) -> list[Candidate]:
    """Non-dominated candidates (accuracy up, FP MACs down), by ascending FP MACs."""
    ranked = sorted(candidates, key=lambda c: (c.fp_macs, -c.accuracy, c.tmax, -c.ts))
    front: list[Candidate] = []
    best_acc = -np.inf
    for c in ranked:
        if c.accuracy > best_acc:
            front.append(c)
            best_acc = c.accuracy
    return front


def distance_quantiles(g: Graph, x: np.ndarray, summary: StationarySummary, nodes: Sequence[int],
                       orders: Sequence[int], qs: Sequence[float], normalize: bool = False) -> dict[int, np.ndarray]:
    """Quantiles of the exit distance at each order, for building ``ts`` grids."""
    from .graph import propagate_hop
    from .propagation import layered_support as _layers

    nodes = np.asarray(nodes, dtype=np.int64)
    L = max(orders)
    layers = _layers(g, nodes, L).layers
    stat = summary.rows(nodes)
    cur = np.asarray(x, dtype=np.float64)
    out = {}
    for l in range(1, L + 1):
        cur = propagate_hop(g, summary.r, cur, layers[l])
        if l in orders:
            d = smoothness_distance(cur[nodes], stat, normalize)
            out[l] = np.quantile(d, qs)
    return out


def write_predictions_csv(outcome: InferenceOutcome, path: str | Path, ids: np.ndarray | None = None) -> None:
    """One row per node; ``ids`` maps internal node ids to the ids written out."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "exit_order", "distance", "predicted_class"])
        for rec in outcome.records:
            node = rec.node if ids is None else int(ids[rec.node])
            w.writerow([node, rec.order, "" if rec.distance is None else f"{rec.distance:.9g}", rec.predicted])


def summary_block(outcome: InferenceOutcome, k: int, labels: np.ndarray | None = None) -> dict:
    block = {
        "nodes": int(len(outcome.nodes)),
        "histogram": outcome.histogram(k),
        "macs": outcome.macs.as_dict(),
        "timings": {
            "total_seconds": outcome.total_seconds,
            "fp_seconds": outcome.fp_seconds,
            "sampling_seconds": outcome.sampling_seconds,
        },
    }
    if labels is not None:
        block["accuracy"] = outcome.accuracy(labels)
    return block


def render_report(outcome: InferenceOutcome, k: int, labels: np.ndarray | None = None) -> str:
    block = summary_block(outcome, k, labels)
    w = 21
    lines = [f"{'nodes':<{w}}{block['nodes']}"]
    if "accuracy" in block:
        lines.append(f"{'accuracy':<{w}}{block['accuracy']:.4f}")
    lines.append(f"{'exit histogram':<{w}}{block['histogram']}")
    m = outcome.macs
    for name in ("stationary", "propagation", "distance", "classification"):
        lines.append(f"{name + ' MACs':<{w}}{getattr(m, name)}")
    lines.append(f"{'total MACs':<{w}}{m.total}  (fp {m.fp}, summary amortised {m.summary})")
    lines.append(f"{'time':<{w}}{outcome.total_seconds * 1e3:.3f} ms (fp {outcome.fp_seconds * 1e3:.3f} ms)")
    return "\n".join(lines) + "\n\n" + json.dumps(block, indent=2)
