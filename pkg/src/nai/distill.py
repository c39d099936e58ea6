"""Inception Distillation: offline distillation from the top-order classifier into
the lower orders, then online distillation against an attention-weighted
ensemble of the top ``r_ens`` classifiers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, InputError
from .graph import InductiveSplit
from .propagation import PropagatedStack, check_backend
from .training import (
    LOG_CLAMP,
    Adam,
    Classifier,
    TrainConfig,
    Validation,
    ce_logit_grad,
    fit,
    init_classifier,
    load_classifier,
    save_classifier,
    tempered_softmax,
)


@dataclass
class DistillConfig:
    temperature: float = 1.2
    lam: float = 0.5
    r_ens: int = 3
    epochs: int = 200
    online_epochs: int = 100
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.0
    seed: int = 0
    activation: str = "tanh"
    teacher_mix: str = "probs"
    stop_teacher_grad: bool = False

    def validate(self, k: int | None = None) -> None:
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda {self.lam} outside [0, 1]")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if self.teacher_mix not in ("probs", "logits"):
            raise ConfigError("teacher_mix must be 'probs' or 'logits'")
        if k is not None and not 2 <= self.r_ens <= k:
            raise ConfigError(f"r_ens={self.r_ens} must satisfy 2 <= r_ens <= k={k}")

    def train_config(self, hidden: tuple[int, ...] = ()) -> TrainConfig:
        return TrainConfig(self.epochs, self.lr, self.weight_decay, self.dropout, None, self.seed, hidden)


def _tanh(a):
    m = np.tanh(a)
    return m, 1.0 - m * m


def _sigmoid(a):
    m = 1.0 / (1.0 + np.exp(-a))
    return m, m * (1.0 - m)


ACTIVATIONS = {"tanh": _tanh, "sigmoid": _sigmoid}


@dataclass
class AttentionScorer:
    """Projection ``s`` (one weight per class) scoring each ensemble member."""

    s: np.ndarray
    activation: str = "tanh"

    @classmethod
    def zeros(cls, n_classes: int, activation: str = "tanh") -> "AttentionScorer":
        return cls(np.zeros(n_classes), activation)


@dataclass
class ClassifierBank:
    backend: str
    classifiers: dict[int, Classifier]
    val_acc: dict[int, float] = field(default_factory=dict)
    scorer: AttentionScorer | None = None
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def k(self) -> int:
        return max(self.classifiers)

    @property
    def n_classes(self) -> int:
        return self.classifiers[self.k].n_classes

    def __getitem__(self, order: int) -> Classifier:
        try:
            return self.classifiers[order]
        except KeyError:
            raise ConfigError(f"bank has no classifier for order {order}") from None

    def check_complete(self) -> None:
        missing = [l for l in range(1, self.k + 1) if l not in self.classifiers]
        if missing:
            raise ConfigError(f"bank is missing orders {missing}")

    def copy(self) -> "ClassifierBank":
        scorer = None if self.scorer is None else AttentionScorer(self.scorer.s.copy(), self.scorer.activation)
        return ClassifierBank(self.backend, {l: c.copy() for l, c in self.classifiers.items()},
                              dict(self.val_acc), scorer, dict(self.meta))


def soft_ce(student_probs: np.ndarray, teacher_probs: np.ndarray, subset: np.ndarray | None = None) -> float:
    """``-mean_i sum_c p_teacher * log p_student`` over ``subset``."""
    ps = np.asarray(student_probs, dtype=np.float64)
    pt = np.asarray(teacher_probs, dtype=np.float64)
    idx = np.arange(len(ps)) if subset is None else np.asarray(subset, dtype=np.int64)
    if len(idx) == 0:
        raise InputError("empty node subset")
    return float(-np.mean(np.sum(pt[idx] * np.log(np.maximum(ps[idx], LOG_CLAMP)), axis=1)))


def soft_ce_logit_grad(z: np.ndarray, teacher_probs: np.ndarray, T: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Soft CE of ``softmax(z / T)`` against ``teacher_probs``; returns loss, logit grad, log p."""
    ps = tempered_softmax(z, T)
    logp = np.log(np.maximum(ps, LOG_CLAMP))
    n = len(z)
    loss = float(-np.sum(teacher_probs * logp) / n)
    g = (ps * teacher_probs.sum(axis=1, keepdims=True) - teacher_probs) / (T * n)
    return loss, g, logp


def offline_loss(
    student: Classifier,
    x: np.ndarray,
    labeled_pos: np.ndarray,
    y: np.ndarray,
    teacher_probs: np.ndarray | None,
    T: float,
    lam: float,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, list[np.ndarray]]:
    """``(1 - lam) * CE(labels) + lam * T^2 * softCE(teacher)`` and parameter grads.

    ``x`` holds the training rows; ``labeled_pos`` indexes the labeled ones
    within ``x`` and ``y`` gives their classes. ``teacher_probs`` are the
    teacher's tempered outputs on every row of ``x``.
    """
    z, cache = student.forward(x, dropout, rng)
    loss = 0.0
    g = np.zeros_like(z)
    if lam < 1.0:
        lc, gc = ce_logit_grad(z[labeled_pos], y)
        loss += (1.0 - lam) * lc
        g[labeled_pos] += (1.0 - lam) * gc
    if lam > 0.0:
        ld, gd, _ = soft_ce_logit_grad(z, teacher_probs, T)
        loss += lam * T * T * ld
        g += lam * T * T * gd
    return loss, student.backward(cache, g)[0]


@dataclass
class TeacherOutput:
    probs: np.ndarray  # tempered teacher distribution
    mixed: np.ndarray  # ensemble prediction before tempering
    weights: np.ndarray  # (rows, members) attention weights
    cache: tuple = field(repr=False, default=())


def ensemble_teacher(
    member_logits: Sequence[np.ndarray],
    scorer: AttentionScorer,
    T: float,
    mix: str = "probs",
) -> TeacherOutput:
    """Attention-weighted ensemble of member predictions.

    Each member's probability row is scored by ``act(y . s)``; the scores
    are softmax-normalised over members and used to mix the members. With
    ``mix="probs"`` the mixture of probability rows goes through another
    softmax; ``mix="logits"`` mixes raw logits instead.
    """
    if len(member_logits) == 0:
        raise InputError("ensemble needs at least one member")
    zs = [np.asarray(z, dtype=np.float64) for z in member_logits]
    ys = [tempered_softmax(z) for z in zs]
    a = np.stack([y @ scorer.s for y in ys], axis=1)
    m, dm = ACTIVATIONS[scorer.activation](a)
    w = tempered_softmax(m)
    items = ys if mix == "probs" else zs
    u = sum(w[:, l, None] * items[l] for l in range(len(items)))
    mixed = tempered_softmax(u) if mix == "probs" else u
    probs = tempered_softmax(mixed, T)
    return TeacherOutput(probs, mixed, w, (zs, ys, dm, w, items, u, mixed, probs, T, mix, scorer.s))


def ensemble_backward(out: TeacherOutput, g_probs: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients w.r.t. each member's logits and the scorer vector."""
    zs, ys, dm, w, items, u, mixed, probs, T, mix, s = out.cache

    def softmax_back(p, g):
        return p * (g - np.sum(g * p, axis=-1, keepdims=True))

    g_mixed = softmax_back(probs, g_probs) / T
    g_u = softmax_back(mixed, g_mixed) if mix == "probs" else g_mixed
    g_w = np.stack([np.sum(item * g_u, axis=1) for item in items], axis=1)
    g_a = softmax_back(w, g_w) * dm
    g_s = sum(ys[l].T @ g_a[:, l] for l in range(len(ys)))
    g_z = []
    for l in range(len(ys)):
        g_y = g_a[:, l, None] * s
        direct = w[:, l, None] * g_u
        if mix == "probs":
            g_y = g_y + direct
            g_z.append(softmax_back(ys[l], g_y))
        else:
            g_z.append(softmax_back(ys[l], g_y) + direct)
    return g_z, np.asarray(g_s, dtype=np.float64)


def online_loss(
    classifiers: dict[int, Classifier],
    scorer: AttentionScorer,
    features: dict[int, np.ndarray],
    labeled_pos: np.ndarray,
    y: np.ndarray,
    students: Sequence[int],
    members: Sequence[int],
    T: float,
    lam: float,
    mix: str = "probs",
    stop_teacher_grad: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> tuple[float, dict[int, list[np.ndarray]], np.ndarray]:
    """Sum over students of ``(1 - lam) * CE + lam * T^2 * softCE(ensemble teacher)``.

    Returns the loss, per-classifier parameter gradients and the scorer
    gradient. Members receive gradient through the teacher unless
    ``stop_teacher_grad``; the scorer always does when ``lam > 0``.
    """
    involved = sorted(set(students) | set(members))
    logits, caches = {}, {}
    for l in involved:
        logits[l], caches[l] = classifiers[l].forward(features[l], dropout, rng)
    teacher = ensemble_teacher([logits[l] for l in members], scorer, T, mix)

    g_logits = {l: np.zeros_like(logits[l]) for l in involved}
    g_teacher = np.zeros_like(teacher.probs)
    loss = 0.0
    n = len(teacher.probs)
    for l in students:
        z = logits[l]
        if lam < 1.0:
            lc, gc = ce_logit_grad(z[labeled_pos], y)
            loss += (1.0 - lam) * lc
            g_logits[l][labeled_pos] += (1.0 - lam) * gc
        if lam > 0.0:
            le, ge, logp = soft_ce_logit_grad(z, teacher.probs, T)
            loss += lam * T * T * le
            g_logits[l] += lam * T * T * ge
            g_teacher -= (lam * T * T / n) * logp

    g_s = np.zeros_like(scorer.s)
    if lam > 0.0:
        g_members, g_s = ensemble_backward(teacher, g_teacher)
        if not stop_teacher_grad:
            for l, g in zip(members, g_members):
                g_logits[l] += g
    grads = {l: classifiers[l].backward(caches[l], g_logits[l])[0] for l in involved}
    return loss, grads, g_s


class _TrainRows:
    """Training rows (labeled plus unlabeled) and where the labeled ones sit."""

    def __init__(self, labels: np.ndarray, split: InductiveSplit):
        self.rows = split.train
        self.labeled_pos = np.searchsorted(self.rows, split.labeled_train)
        self.y = np.asarray(labels, dtype=np.int64)[split.labeled_train]
        if len(self.y) == 0:
            raise InputError("no labeled training nodes")
        if (self.y < 0).any():
            raise InputError("labeled_train contains unlabeled (sentinel) nodes")


def offline_distill(
    teacher: Classifier,
    stack: PropagatedStack,
    labels: np.ndarray,
    split: InductiveSplit,
    cfg: DistillConfig,
    validation: Validation | None = None,
    hidden: tuple[int, ...] | None = None,
) -> ClassifierBank:
    """Train ``f^(1..k-1)`` against the frozen order-k teacher."""
    k = teacher.order
    if stack.k < k:
        raise InputError(f"stack has orders up to {stack.k}, teacher needs {k}")
    cfg.validate()
    hidden = tuple(w.shape[1] for w in teacher.weights[:-1]) if hidden is None else hidden
    rows = _TrainRows(labels, split)
    T, lam = cfg.temperature, cfg.lam
    tcfg = cfg.train_config(hidden)
    teacher_probs = tempered_softmax(teacher.forward(stack.features(k, rows.rows))[0], T)

    bank = ClassifierBank(stack.backend, {k: teacher})
    if validation is not None:
        bank.val_acc[k] = validation.accuracy(teacher)
    for l in range(1, k):
        if lam == 0.0:
            # pure hard-label training: same rows and stream as train_base
            x, pos, tp = stack.features(l, split.labeled_train), np.arange(len(rows.y)), None
        else:
            x, pos, tp = stack.features(l, rows.rows), rows.labeled_pos, teacher_probs
        student = init_classifier(x.shape[1], teacher.n_classes, hidden, cfg.seed, l, stack.backend)

        def loss_grad(rng, batch, student=student, x=x, pos=pos, tp=tp):
            return offline_loss(student, x, pos, rows.y, tp, T, lam, cfg.dropout, rng)

        fit(student, loss_grad, tcfg, len(x), validation)
        bank.classifiers[l] = student
        if validation is not None:
            bank.val_acc[l] = validation.accuracy(student)
    bank.meta.update(temperature=str(T), lam=str(lam), seed=str(cfg.seed))
    return bank


def online_distill(
    bank: ClassifierBank,
    scorer: AttentionScorer | None,
    stack: PropagatedStack,
    labels: np.ndarray,
    split: InductiveSplit,
    cfg: DistillConfig,
    validation: Validation | None = None,
) -> tuple[ClassifierBank, AttentionScorer]:
    """Jointly refine students, the scorer and the ensemble members.

    Every classifier keeps the parameters of its best validation epoch
    (epoch 0 included) when ``validation`` is given.
    """
    bank.check_complete()
    k = bank.k
    cfg.validate(k)
    bank = bank.copy()
    scorer = AttentionScorer.zeros(bank.n_classes, cfg.activation) if scorer is None else \
        AttentionScorer(np.array(scorer.s, dtype=np.float64), scorer.activation)
    rows = _TrainRows(labels, split)
    students = list(range(1, k))
    members = list(range(k - cfg.r_ens + 1, k + 1))
    feats = {l: stack.features(l, rows.rows) for l in range(1, k + 1)}

    trainable = list(students)
    if cfg.lam > 0.0 and not cfg.stop_teacher_grad:
        trainable += [l for l in members if l not in students]
    params = [p for l in trainable for p in bank[l].params()]
    opt = Adam(params, cfg.lr, weight_decay=cfg.weight_decay)
    s_opt = Adam([scorer.s], cfg.lr) if cfg.lam > 0.0 else None
    rng = np.random.default_rng([cfg.seed, 0, 2])

    best = {}
    if validation is not None:
        best = {l: (validation.accuracy(bank[l]), [p.copy() for p in bank[l].params()]) for l in trainable}
    for _ in range(cfg.online_epochs):
        _, grads, g_s = online_loss(bank.classifiers, scorer, feats, rows.labeled_pos, rows.y, students, members,
                                    cfg.temperature, cfg.lam, cfg.teacher_mix, cfg.stop_teacher_grad,
                                    cfg.dropout, rng)
        opt.step([g for l in trainable for g in grads[l]])
        if s_opt is not None:
            s_opt.step([g_s])
        if validation is not None:
            for l in trainable:
                acc = validation.accuracy(bank[l])
                if acc > best[l][0]:
                    best[l] = (acc, [p.copy() for p in bank[l].params()])
    for l, (acc, snapshot) in best.items():
        bank[l].load_params(snapshot)
    if validation is not None:
        bank.val_acc.update({l: validation.accuracy(bank[l]) for l in bank.classifiers})
    bank.scorer = scorer
    bank.meta.update(temperature=str(cfg.temperature), lam=str(cfg.lam), r_ens=str(cfg.r_ens),
                     seed=str(cfg.seed))
    return bank, scorer


def independent_bank(
    stack: PropagatedStack,
    labels: np.ndarray,
    split: InductiveSplit,
    cfg: TrainConfig,
    k: int | None = None,
    validation: Validation | None = None,
    n_classes: int | None = None,
) -> ClassifierBank:
    """One classifier per order trained on hard labels only (no distillation)."""
    from .training import train_base

    k = stack.k if k is None else k
    bank = ClassifierBank(stack.backend, {})
    for l in range(1, k + 1):
        c, _ = train_base(stack, labels, split, cfg, validation, order=l, n_classes=n_classes)
        bank.classifiers[l] = c
        if validation is not None:
            bank.val_acc[l] = validation.accuracy(c)
    return bank


def save_bank(bank: ClassifierBank, directory: str | Path) -> None:
    """Per-order ``order_<l>.naic`` checkpoints plus a ``manifest.txt`` of ``key = value`` lines."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for l, c in sorted(bank.classifiers.items()):
        save_classifier(c, d / f"order_{l}.naic")
    meta = {"backend": bank.backend, "k": str(bank.k), **bank.meta}
    meta["orders"] = ",".join(str(l) for l in sorted(bank.classifiers))
    if bank.scorer is not None:
        meta["scorer"] = ",".join(repr(float(v)) for v in bank.scorer.s)
        meta["activation"] = bank.scorer.activation
    for l, acc in sorted(bank.val_acc.items()):
        meta[f"val_acc_{l}"] = repr(float(acc))
    with open(d / "manifest.txt", "w") as fh:
        for key, value in meta.items():
            fh.write(f"{key} = {value}\n")


def read_manifest(path: str | Path) -> dict[str, str]:
    meta = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise InputError(f"{path}: malformed manifest line {line!r}")
            meta[key.strip()] = value.strip()
    return meta


def load_bank(directory: str | Path) -> ClassifierBank:
    d = Path(directory)
    meta = read_manifest(d / "manifest.txt")
    backend = check_backend(meta.pop("backend"))
    meta.pop("k", None)
    orders = [int(o) for o in meta.pop("orders").split(",") if o]
    classifiers = {l: load_classifier(d / f"order_{l}.naic") for l in orders}
    for l, c in classifiers.items():
        if c.order != l or c.backend != backend:
            raise ConfigError(f"checkpoint order_{l} was trained for order {c.order} / {c.backend}")
    scorer = None
    if "scorer" in meta:
        s = np.array([float(v) for v in meta.pop("scorer").split(",")])
        scorer = AttentionScorer(s, meta.pop("activation", "tanh"))
    val_acc = {int(key[8:]): float(meta.pop(key)) for key in list(meta) if key.startswith("val_acc_")}
    return ClassifierBank(backend, classifiers, val_acc, scorer, meta)
