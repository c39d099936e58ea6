"""End-to-end inductive workflow shared by the CLI, demos and acceptance tests.

Training sees only the graph induced on the training nodes. Validation and
test nodes then arrive together with their edges; the graph is extended and
the stationary summary updated incrementally before inference.

Node ids inside the context follow *arrival order*: training nodes first
(ascending original id), then every other node (ascending original id).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import DatasetBundle
from .distill import (
    ClassifierBank,
    DistillConfig,
    independent_bank,
    offline_distill,
    online_distill,
)
from .engine import Candidate, InferenceOutcome, NapConfig, infer, make_grid, sweep, vanilla_infer
from .graph import Graph, InductiveSplit, extend_graph, induce_train_graph
from .propagation import (
    PropagatedStack,
    StationarySummary,
    precompute_stack,
    stationary_summary,
    update_summary,
)
from .training import Classifier, TrainConfig, Validation, accuracy, default_hidden, train_base


@dataclass
class InductiveContext:
    bundle: DatasetBundle
    r: float
    train_graph: Graph
    graph: Graph  # train graph extended with every arriving node
    arrival: np.ndarray  # arrival id -> original id
    position: np.ndarray  # original id -> arrival id
    features: np.ndarray  # arrival order
    labels: np.ndarray  # arrival order, -1 for unlabeled
    split: InductiveSplit  # arrival ids
    summary: StationarySummary  # current for ``graph``

    @property
    def n_train(self) -> int:
        return self.train_graph.n

    def train_split(self) -> InductiveSplit:
        """Training sections in train-graph ids (identical to arrival ids)."""
        empty = np.zeros(0, dtype=np.int64)
        return InductiveSplit(self.split.labeled_train, self.split.unlabeled_train, empty, empty)


def prepare(bundle: DatasetBundle, r: float = 0.5) -> InductiveContext:
    bundle.validate()
    g = bundle.graph
    split = bundle.split
    train_graph, old_to_new = induce_train_graph(g, split)
    train_ids = split.train
    rest = np.setdiff1d(np.arange(g.n), train_ids)
    arrival = np.concatenate([train_ids, rest])
    position = np.empty(g.n, dtype=np.int64)
    position[arrival] = np.arange(g.n)

    x = bundle.features[arrival]
    summary = stationary_summary(train_graph, r, x[: len(train_ids)])

    e = position[g.edge_array()]
    arriving = e[(e >= len(train_ids)).any(axis=1)]
    full, delta = extend_graph(train_graph, len(rest), arriving)
    summary = update_summary(summary, full, delta, x)

    mapped = InductiveSplit(*(np.sort(position[getattr(split, s)]) for s in InductiveSplit.SECTIONS))
    return InductiveContext(bundle, r, train_graph, full, arrival, position, x, bundle.labels[arrival],
                            mapped, summary)


def train_stack(ctx: InductiveContext, k: int, backend: str = "sgc") -> PropagatedStack:
    return precompute_stack(ctx.train_graph, ctx.r, ctx.features[: ctx.n_train], k, backend)


def validation_set(ctx: InductiveContext, k: int, backend: str = "sgc", nodes: np.ndarray | None = None) -> Validation:
    """Per-order classifier inputs of held-out nodes on the full (arrived) graph."""
    nodes = ctx.split.validation if nodes is None else nodes
    stack = precompute_stack(ctx.graph, ctx.r, ctx.features, k, backend)
    return Validation({l: stack.features(l, nodes) for l in range(1, k + 1)}, ctx.labels[nodes])


def full_stack(ctx: InductiveContext, k: int, backend: str = "sgc") -> PropagatedStack:
    return precompute_stack(ctx.graph, ctx.r, ctx.features, k, backend)


def fit_teacher(ctx: InductiveContext, stack: PropagatedStack, cfg: TrainConfig,
                validation: Validation | None = None) -> Classifier:
    c, _ = train_base(stack, ctx.labels[: ctx.n_train], ctx.train_split(), cfg, validation,
                      n_classes=ctx.bundle.n_classes)
    return c


def build_bank(
    ctx: InductiveContext,
    k: int,
    backend: str = "sgc",
    train_cfg: TrainConfig | None = None,
    distill_cfg: DistillConfig | None = None,
    mode: str = "full",
    teacher: Classifier | None = None,
) -> ClassifierBank:
    """Train a classifier bank.

    ``mode`` is ``"none"`` (independent hard-label training per order),
    ``"offline"`` or ``"full"`` (offline then online distillation).
    """
    train_cfg = train_cfg or TrainConfig(hidden=default_hidden(backend))
    distill_cfg = distill_cfg or DistillConfig(seed=train_cfg.seed)
    stack = train_stack(ctx, k, backend)
    val = validation_set(ctx, k, backend)
    labels = ctx.labels[: ctx.n_train]
    split = ctx.train_split()
    if mode == "none":
        bank = independent_bank(stack, labels, split, train_cfg, k, val, ctx.bundle.n_classes)
    else:
        if teacher is None:
            teacher = fit_teacher(ctx, stack, train_cfg, val)
        bank = offline_distill(teacher, stack, labels, split, distill_cfg, val)
        if mode == "full":
            bank, _ = online_distill(bank, None, stack, labels, split, distill_cfg, val)
        elif mode != "offline":
            raise ValueError(f"unknown mode {mode!r}")
    bank.meta["r"] = repr(ctx.r)
    bank.meta["mode"] = mode
    return bank


def calibrate(bundle: DatasetBundle, k: int = 5, r: float = 0.5, seed: int = 0,
              raw_max: float = 0.70, propagated_min: float = 0.85) -> dict:
    """Check that a bundle needs propagation: raw features alone are weak, order ``k`` is strong.

    Both scores are validation accuracies of a linear classifier trained
    inductively. Sets ``bundle.meta["calibration"]`` to ``"ok"`` or ``"failed"``.
    """
    ctx = prepare(bundle, r)
    cfg = TrainConfig(seed=seed)
    labels = ctx.labels[: ctx.n_train]
    val = ctx.split.validation
    x_train = ctx.features[: ctx.n_train]
    raw = PropagatedStack("sgc", r, (x_train, x_train))
    raw_clf, _ = train_base(raw, labels, ctx.train_split(), cfg, n_classes=bundle.n_classes)
    raw_acc = accuracy(raw_clf, ctx.features[val], ctx.labels[val])
    top = fit_teacher(ctx, train_stack(ctx, k), cfg)
    top_acc = accuracy(top, full_stack(ctx, k).features(k, val), ctx.labels[val])
    ok = raw_acc < raw_max and top_acc > propagated_min
    bundle.meta["calibration"] = "ok" if ok else "failed"
    return {"raw_acc": raw_acc, "propagated_acc": top_acc, "k": k, "raw_max": raw_max,
            "propagated_min": propagated_min, "ok": ok}


def classifier_accuracy(ctx: InductiveContext, bank: ClassifierBank, order: int, nodes: np.ndarray) -> float:
    stack = full_stack(ctx, order, bank.backend)
    return accuracy(bank[order], stack.features(order, nodes), ctx.labels[nodes])


def run_vanilla(ctx: InductiveContext, bank: ClassifierBank, nodes: np.ndarray, batch_size: int = 500,
                k: int | None = None) -> InferenceOutcome:
    return vanilla_infer(ctx.graph, ctx.features, bank, ctx.r, nodes, k, batch_size)


def run_nai(ctx: InductiveContext, bank: ClassifierBank, cfg: NapConfig, nodes: np.ndarray) -> InferenceOutcome:
    return infer(ctx.graph, ctx.features, bank, ctx.summary, cfg, nodes)


def default_ts_grid(ctx: InductiveContext, nodes: np.ndarray, tmax: int,
                    quantiles=(0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0)) -> list[float]:
    """Thresholds spread over the observed exit distances (plus 0 and +inf-like)."""
    from .engine import distance_quantiles

    q = distance_quantiles(ctx.graph, ctx.features, ctx.summary, nodes, list(range(1, tmax + 1)), quantiles)
    values = np.unique(np.concatenate([v for v in q.values()]))
    return [0.0] + [float(v) * (1 + 1e-9) for v in values]


def select_config(candidates: list[Candidate], vanilla_fp: float, min_reduction: float) -> Candidate | None:
    """Best-accuracy candidate whose FP MACs are at most ``vanilla_fp / min_reduction``."""
    ok = [c for c in candidates if c.fp_macs * min_reduction <= vanilla_fp]
    return ok[0] if ok else None


def sweep_validation(ctx: InductiveContext, bank: ClassifierBank, grid, batch_size: int = 500,
                     max_fp_macs: float | None = None) -> list[Candidate]:
    return sweep(ctx.graph, ctx.features, bank, ctx.summary, grid, ctx.split.validation, ctx.labels,
                 batch_size, max_fp_macs=max_fp_macs)
