"""Per-order classifiers, softmax/cross-entropy, Adam and a finite-difference checker.

Gradients are derived by hand layer by layer. :func:`gradient_check` is the
contract every loss in the package is tested against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InputError, NumericError
from .graph import InductiveSplit
from .propagation import BACKENDS, PropagatedStack

LOG_CLAMP = 1e-12


@dataclass
class Classifier:
    """Linear model (one layer) or ReLU MLP; weights are stored ``(in, out)``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    order: int = 0
    backend: str = "sgc"

    @property
    def kind(self) -> str:
        return "linear" if len(self.weights) == 1 else "mlp"

    @property
    def in_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "Classifier":
        return Classifier([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.order, self.backend)

    def load_params(self, params: Sequence[np.ndarray]) -> None:
        for i, p in enumerate(params):
            target = self.weights[i // 2] if i % 2 == 0 else self.biases[i // 2]
            target[...] = p

    def forward(self, x: np.ndarray, dropout: float = 0.0, rng: np.random.Generator | None = None):
        """Logits plus the cache needed by :meth:`backward`."""
        cache = []
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            mask = None
            if dropout > 0.0 and rng is not None:
                mask = (rng.random(h.shape) >= dropout) / (1.0 - dropout)
                h = h * mask
            pre = h @ w + b
            cache.append((h, mask, pre))
            h = pre if i == last else np.maximum(pre, 0.0)
        return h, cache

    def backward(self, cache, g_out: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
        """Parameter gradients (in :meth:`params` order) and the input gradient."""
        grads: list[np.ndarray] = [None] * (2 * len(self.weights))  # type: ignore[list-item]
        g = g_out
        for i in range(len(self.weights) - 1, -1, -1):
            h, mask, pre = cache[i]
            if i != len(self.weights) - 1:
                g = g * (pre > 0.0)
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
            if mask is not None:
                g = g * mask
        return grads, g


def init_classifier(
    in_width: int,
    n_classes: int,
    hidden: Sequence[int] = (),
    seed: int = 0,
    order: int = 0,
    backend: str = "sgc",
) -> Classifier:
    """Glorot-uniform weights, zero biases; the stream depends on ``(seed, order)``."""
    rng = np.random.default_rng([seed, order])
    widths = [in_width, *hidden, n_classes]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return Classifier(weights, biases, order, backend)


def forward_logits(c: Classifier, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != c.in_width:
        raise InputError(f"row width {rows.shape[-1]} != classifier input width {c.in_width}")
    return c.forward(rows)[0]


def tempered_softmax(z: np.ndarray, T: float = 1.0) -> np.ndarray:
    if not T > 0:
        raise InputError(f"temperature must be positive, got {T}")
    z = np.asarray(z, dtype=np.float64) / T
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _class_ids(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    return labels.argmax(axis=-1) if labels.ndim == 2 else labels.astype(np.int64)


def hard_ce(probs: np.ndarray, labels: np.ndarray, subset: np.ndarray | None = None) -> float:
    """Mean ``-log p[y]`` over ``subset`` (rows of ``probs``); labels are ids or one-hot."""
    probs = np.asarray(probs, dtype=np.float64)
    y = _class_ids(labels)
    idx = np.arange(len(probs)) if subset is None else np.asarray(subset, dtype=np.int64)
    if len(idx) == 0:
        raise InputError("empty node subset")
    p = probs[idx, y[idx]]
    return float(-np.mean(np.log(np.maximum(p, LOG_CLAMP))))


def ce_logit_grad(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Hard CE of ``softmax(z)`` against ids ``y`` (mean over rows) and its logit gradient."""
    p = tempered_softmax(z)
    n = len(z)
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), y], LOG_CLAMP))))
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    return loss, g / n


def accuracy(c: Classifier, rows: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return float("nan")
    return float(np.mean(forward_logits(c, rows).argmax(axis=1) == y))


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[np.ndarray], lr: float = 0.01, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if self.weight_decay:
                g = g + self.weight_decay * p
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.0
    batch_size: int | None = None
    seed: int = 0
    hidden: tuple[int, ...] = ()

    def validate(self) -> None:
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.dropout <= 0.7:
            raise ConfigError(f"dropout {self.dropout} outside [0, 0.7]")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class History:
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    best_epoch: int = 0


@dataclass
class Validation:
    """Held-out rows per propagation order plus their class ids."""

    features: dict[int, np.ndarray]
    labels: np.ndarray

    def accuracy(self, c: Classifier) -> float:
        return accuracy(c, self.features[c.order], self.labels)


def default_hidden(backend: str) -> tuple[int, ...]:
    return (256,) if backend == "sign" else ()


def fit(
    c: Classifier,
    loss_grad: Callable[[np.random.Generator, np.ndarray | None], tuple[float, list[np.ndarray]]],
    cfg: TrainConfig,
    n_rows: int,
    validation: Validation | None = None,
    train_eval: Callable[[Classifier], float] | None = None,
) -> History:
    """Optimise ``c`` in place; keeps the parameters of the best validation epoch.

    ``loss_grad(rng, batch)`` returns the loss and parameter gradients;
    ``batch`` is ``None`` for full-batch steps.
    """
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, c.order, 1])
    opt = Adam(c.params(), cfg.lr, weight_decay=cfg.weight_decay)
    hist = History()
    best = (validation.accuracy(c) if validation else -np.inf, [p.copy() for p in c.params()])
    for epoch in range(1, cfg.epochs + 1):
        if cfg.batch_size is None or cfg.batch_size >= n_rows:
            batches = [None]
        else:
            perm = rng.permutation(n_rows)
            batches = [perm[i : i + cfg.batch_size] for i in range(0, n_rows, cfg.batch_size)]
        for b in batches:
            loss, grads = loss_grad(rng, b)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}")
            opt.step(grads)
        hist.loss.append(loss)
        if train_eval is not None:
            hist.train_acc.append(train_eval(c))
        if validation is not None:
            acc = validation.accuracy(c)
            hist.val_acc.append(acc)
            if acc > best[0]:
                best = (acc, [p.copy() for p in c.params()])
                hist.best_epoch = epoch
    if validation is not None:
        c.load_params(best[1])
    else:
        hist.best_epoch = cfg.epochs
    return hist


def _labeled_rows(stack: PropagatedStack, labels: np.ndarray, split: InductiveSplit, order: int):
    idx = split.labeled_train
    if len(idx) == 0:
        raise InputError("no labeled training nodes")
    y = np.asarray(labels, dtype=np.int64)[idx]
    if (y < 0).any():
        raise InputError("labeled_train contains unlabeled (sentinel) nodes")
    return stack.features(order, idx), y


def train_base(
    stack: PropagatedStack,
    labels: np.ndarray,
    split: InductiveSplit,
    cfg: TrainConfig,
    validation: Validation | None = None,
    order: int | None = None,
    n_classes: int | None = None,
) -> tuple[Classifier, History]:
    """Fit ``f^(order)`` (default: the top order) with hard cross-entropy on labeled nodes."""
    order = stack.k if order is None else order
    x, y = _labeled_rows(stack, labels, split, order)
    c_count = n_classes or int(np.max(labels)) + 1
    c = init_classifier(x.shape[1], c_count, cfg.hidden, cfg.seed, order, stack.backend)

    def loss_grad(rng, batch):
        xb, yb = (x, y) if batch is None else (x[batch], y[batch])
        z, cache = c.forward(xb, cfg.dropout, rng)
        loss, gz = ce_logit_grad(z, yb)
        return loss, c.backward(cache, gz)[0]

    hist = fit(c, loss_grad, cfg, len(y), validation, lambda m: accuracy(m, x, y))
    return c, hist


def gradient_check(
    loss_and_grad: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
    params: Sequence[np.ndarray],
    probes: int = 20,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``probes`` coordinates are drawn at random across all parameter arrays.
    """
    params = [np.array(p, dtype=np.float64) for p in params]
    loss, grads = loss_and_grad(params)
    if not np.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    if total == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    picks = rng.choice(total, size=min(probes, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for flat in picks:
        a = int(np.searchsorted(offsets, flat, side="right") - 1)
        j = int(flat - offsets[a])
        p = params[a].reshape(-1)
        orig = p[j]
        p[j] = orig + step
        up = loss_and_grad(params)[0]
        p[j] = orig - step
        down = loss_and_grad(params)[0]
        p[j] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NumericError("loss became non-finite while probing")
        numeric = (up - down) / (2.0 * step)
        analytic = float(np.asarray(grads[a]).reshape(-1)[j])
        worst = max(worst, abs(analytic - numeric) / max(1e-8, abs(numeric)))
    return worst


# Checkpoint layout (little-endian):
#   b"NAIC" | u32 version | u8 kind | u8 backend | u32 order | u32 layers
#   per layer: u64 rows | u64 cols | rows*cols f64 weights | cols f64 biases
_MAGIC = b"NAIC"
_VERSION = 1
_KINDS = ("linear", "mlp")


def save_classifier(c: Classifier, path: str | Path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<IBBII", _VERSION, _KINDS.index(c.kind), BACKENDS.index(c.backend),
                             c.order, len(c.weights)))
        for w, b in zip(c.weights, c.biases):
            fh.write(struct.pack("<QQ", *w.shape))
            fh.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())


def load_classifier(path: str | Path) -> Classifier:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise InputError(f"{path}: not a classifier checkpoint")
    version, kind, backend, order, layers = struct.unpack_from("<IBBII", data, 4)
    if version != _VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    pos = 4 + struct.calcsize("<IBBII")
    weights, biases = [], []
    try:
        for _ in range(layers):
            rows, cols = struct.unpack_from("<QQ", data, pos)
            pos += 16
            weights.append(np.frombuffer(data, "<f8", rows * cols, pos).reshape(rows, cols).astype(np.float64))
            pos += 8 * rows * cols
            biases.append(np.frombuffer(data, "<f8", cols, pos).astype(np.float64))
            pos += 8 * cols
    except (struct.error, ValueError):
        raise InputError(f"{path}: truncated checkpoint") from None
    c = Classifier(weights, biases, order, BACKENDS[backend])
    if c.kind != _KINDS[kind]:
        raise InputError(f"{path}: kind tag does not match layer count")
    return c
