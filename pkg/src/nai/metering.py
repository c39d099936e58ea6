"""MACs accounting for the four inference procedures and wall-clock benchmarking.

Counting rules (one multiply-add = 1 MAC):

* propagation hop: ``sum_{i in out-set} (deg(i) + 1) * f``
* running average (s2gc): ``f`` per averaged row, charged to propagation
* stationary state: ``f`` per evaluated node; the one-time summary
  (``n * f``) is kept on a separate, amortised line
* distance: ``f`` per comparison (the square root is free)
* classification: ``sum over layers of in * out`` per classified node
"""

from __future__ import annotations

import csv
import io
import statistics
import time
from contextlib import nullcontext
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .errors import InputError

KINDS = ("propagation", "average", "stationary", "distance", "classification", "summary")


class MacsTrace:
    """Append-only log of executed kernels."""

    def __init__(self):
        self.events: list[tuple] = []

    def propagation(self, degrees: np.ndarray, f: int) -> None:
        self.events.append(("propagation", int(np.sum(degrees + 1)), int(f)))

    def average(self, rows: int, f: int) -> None:
        self.events.append(("average", int(rows), int(f)))

    def stationary(self, rows: int, f: int) -> None:
        self.events.append(("stationary", int(rows), int(f)))

    def distance(self, rows: int, f: int) -> None:
        self.events.append(("distance", int(rows), int(f)))

    def classification(self, rows: int, layer_shapes: Sequence[tuple[int, int]]) -> None:
        self.events.append(("classification", int(rows), tuple((int(a), int(b)) for a, b in layer_shapes)))

    def summary(self, n: int, f: int) -> None:
        self.events.append(("summary", int(n), int(f)))

    def extend(self, other: "MacsTrace") -> None:
        self.events.extend(other.events)


@dataclass(frozen=True)
class MacsBreakdown:
    stationary: int = 0
    propagation: int = 0
    distance: int = 0
    classification: int = 0
    summary: int = 0  # amortised, excluded from total
    nodes: int = 0

    @property
    def total(self) -> int:
        return self.stationary + self.propagation + self.distance + self.classification

    @property
    def fp(self) -> int:
        """Feature-processing MACs: propagation plus distance."""
        return self.propagation + self.distance

    def per_node(self, value: int | None = None) -> float:
        value = self.total if value is None else value
        return value / self.nodes if self.nodes else 0.0

    def __add__(self, other: "MacsBreakdown") -> "MacsBreakdown":
        return MacsBreakdown(*(a + b for a, b in zip(self._fields(), other._fields())))

    def _fields(self):
        return (self.stationary, self.propagation, self.distance, self.classification, self.summary, self.nodes)

    def as_dict(self) -> dict[str, Any]:
        return {
            "stationary": self.stationary,
            "propagation": self.propagation,
            "distance": self.distance,
            "classification": self.classification,
            "total": self.total,
            "fp": self.fp,
            "summary_amortised": self.summary,
            "nodes": self.nodes,
            "per_node_total": self.per_node(),
            "per_node_fp": self.per_node(self.fp),
        }


def meter_macs(trace: MacsTrace | Sequence[tuple], nodes: int = 0) -> MacsBreakdown:
    events = trace.events if isinstance(trace, MacsTrace) else trace
    acc = dict.fromkeys(KINDS, 0)
    for ev in events:
        if not isinstance(ev, tuple) or len(ev) != 3 or ev[0] not in KINDS:
            raise InputError(f"malformed trace event {ev!r}")
        kind, count, width = ev
        if kind == "classification":
            if count < 0 or any(a < 0 or b < 0 for a, b in width):
                raise InputError(f"negative count in {ev!r}")
            acc[kind] += count * sum(a * b for a, b in width)
        else:
            if count < 0 or width < 0:
                raise InputError(f"negative count in {ev!r}")
            acc[kind] += count * width
    return MacsBreakdown(
        stationary=acc["stationary"],
        propagation=acc["propagation"] + acc["average"],
        distance=acc["distance"],
        classification=acc["classification"],
        summary=acc["summary"],
        nodes=nodes,
    )


@dataclass(frozen=True)
class TimingReport:
    total_mean: float
    total_std: float
    fp_mean: float
    fp_std: float
    repetitions: int
    nodes: int = 1
    batch_size: int | None = None
    samples: tuple[float, ...] = field(default=(), repr=False)

    @property
    def per_node_ms(self) -> float:
        return 1e3 * self.total_mean / max(self.nodes, 1)

    @property
    def fp_per_node_ms(self) -> float:
        return 1e3 * self.fp_mean / max(self.nodes, 1)


def benchmark(
    run: Callable[[], Any],
    repetitions: int = 5,
    warmup: int = 1,
    nodes: int = 1,
    batch_size: int | None = None,
    single_thread: bool = True,
) -> TimingReport:
    """Time ``run`` on the monotonic clock after ``warmup`` discarded calls.

    If ``run`` returns an object with an ``fp_seconds`` attribute it is
    recorded as the feature-processing share of that repetition.
    """
    if repetitions < 1:
        raise InputError("repetitions must be >= 1")
    limiter = _single_thread() if single_thread else nullcontext()
    totals, fps = [], []
    with limiter:
        for _ in range(warmup):
            run()
        for _ in range(repetitions):
            t0 = time.perf_counter()
            out = run()
            elapsed = time.perf_counter() - t0
            totals.append(elapsed)
            fps.append(min(float(getattr(out, "fp_seconds", 0.0)), elapsed))
    std = statistics.stdev if repetitions > 1 else (lambda _: 0.0)
    return TimingReport(statistics.fmean(totals), std(totals), statistics.fmean(fps), std(fps),
                        repetitions, nodes, batch_size, tuple(totals))


def _single_thread():
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=1)


@dataclass(frozen=True)
class MethodResult:
    """One row of a comparison: per-node averages."""

    method: str
    acc: float
    mmacs: float
    fp_mmacs: float
    time_ms: float
    fp_time_ms: float


CSV_HEADER = ("method", "acc", "mmacs", "fp_mmacs", "time_ms", "fp_time_ms", "ratio_time", "ratio_fp")


def _ratio(base: float, value: float) -> float:
    if value == 0:
        return float("inf") if base > 0 else 1.0
    return base / value


@dataclass(frozen=True)
class ComparisonTable:
    rows: tuple[MethodResult, ...]
    vanilla: MethodResult

    def ratios(self, row: MethodResult) -> dict[str, float]:
        v = self.vanilla
        return {
            "mmacs": _ratio(v.mmacs, row.mmacs),
            "fp_mmacs": _ratio(v.fp_mmacs, row.fp_mmacs),
            "time_ms": _ratio(v.time_ms, row.time_ms),
            "fp_time_ms": _ratio(v.fp_time_ms, row.fp_time_ms),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in self.rows:
            r = self.ratios(row)
            w.writerow([row.method] + [f"{v:.6f}" for v in (row.acc, row.mmacs, row.fp_mmacs, row.time_ms,
                                                               row.fp_time_ms, r["time_ms"], r["fp_mmacs"])])
        return buf.getvalue()

    def render(self) -> str:
        mw = max([16] + [len(r.method) + 2 for r in self.rows])
        head = f"{'method':<{mw}}{'ACC (%)':>9}{'mMACs':>16}{'FP mMACs':>16}{'Time (ms)':>16}{'FP Time (ms)':>16}"
        lines = [head, "-" * len(head)]
        for row in self.rows:
            r = self.ratios(row)

            def cell(value, key):
                if row is self.vanilla:
                    return f"{value:.4f}"
                return f"{value:.4f} ({r[key]:.0f})"

            lines.append(
                f"{row.method:<{mw}}{100 * row.acc:>9.2f}{cell(row.mmacs, 'mmacs'):>16}"
                f"{cell(row.fp_mmacs, 'fp_mmacs'):>16}{cell(row.time_ms, 'time_ms'):>16}"
                f"{cell(row.fp_time_ms, 'fp_time_ms'):>16}"
            )
        return "\n".join(lines)


def comparison_table(results: Sequence[MethodResult], vanilla: str = "vanilla") -> ComparisonTable:
    base = [r for r in results if r.method == vanilla]
    if not base:
        raise InputError(f"no {vanilla!r} row among results")
    return ComparisonTable(tuple(results), base[0])
