"""Dataset bundles: file formats and a planted-partition generator.

Files written by :func:`write_dataset`:

``edges.txt``      ``u v`` per line, ``#`` comments (first line records ``n``)
``features.naif``  ``b"NAIF" | u32 version | u64 n | u64 f | n*f float32``, little-endian
``labels.txt``     one class id per line, ``-1`` for unlabeled
``split.txt``      sections ``[labeled_train]`` ... ``[test]``, one id per line
"""

from __future__ import annotations

import logging
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError
from .graph import Graph, InductiveSplit, build_graph, read_edge_list, write_edge_list

log = logging.getLogger(__name__)

UNLABELED = -1
FILES = {"edges": "edges.txt", "features": "features.naif", "labels": "labels.txt", "split": "split.txt"}

_FEAT_MAGIC = b"NAIF"
_FEAT_VERSION = 1
_FEAT_HEADER = "<4sIQQ"


@dataclass
class DatasetBundle:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    split: InductiveSplit
    n_classes: int
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def validate(self) -> None:
        n = self.graph.n
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise InputError(f"feature rows {self.features.shape[0]} != node count {n}")
        if self.features.shape[1] == 0:
            raise InputError("feature dimension is zero")
        if len(self.labels) != n:
            raise InputError(f"label count {len(self.labels)} != node count {n}")
        if self.n_classes < 2:
            raise InputError("need at least two classes")
        self.split.validate(n)
        for section in ("labeled_train", "validation", "test"):
            ids = getattr(self.split, section)
            if (self.labels[ids] == UNLABELED).any():
                raise InputError(f"{section} contains nodes without labels")


def write_features(x: np.ndarray, path: str | Path) -> None:
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] == 0:
        raise InputError(f"cannot write feature matrix of shape {x.shape}")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_FEAT_HEADER, _FEAT_MAGIC, _FEAT_VERSION, x.shape[0], x.shape[1]))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    """Features widened to float64."""
    data = Path(path).read_bytes()
    size = struct.calcsize(_FEAT_HEADER)
    if len(data) < size:
        raise InputError(f"{path}: truncated feature header")
    magic, version, n, f = struct.unpack_from(_FEAT_HEADER, data)
    if magic != _FEAT_MAGIC:
        raise InputError(f"{path}: bad magic {magic!r}")
    if version != _FEAT_VERSION:
        raise InputError(f"{path}: unsupported version {version}")
    if len(data) != size + 4 * n * f:
        raise InputError(f"{path}: expected {n}x{f} float32 payload, got {len(data) - size} bytes")
    return np.frombuffer(data, "<f4", n * f, size).reshape(n, f).astype(np.float64)


def write_labels(labels: np.ndarray, path: str | Path, n_classes: int | None = None) -> None:
    with open(path, "w") as fh:
        if n_classes is not None:
            fh.write(f"# classes={n_classes}\n")
        fh.writelines(f"{int(v)}\n" for v in labels)


def read_labels(path: str | Path) -> tuple[np.ndarray, int | None]:
    values, n_classes = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            if s.startswith("#"):
                m = re.search(r"classes\s*=\s*(\d+)", s)
                if m:
                    n_classes = int(m.group(1))
                continue
            try:
                values.append(int(s))
            except ValueError:
                raise InputError(f"{path}:{lineno}: bad class id {s!r}") from None
    labels = np.array(values, dtype=np.int64)
    if (labels < UNLABELED).any():
        raise InputError(f"{path}: unknown class id {int(labels.min())}")
    if n_classes is not None and len(labels) and labels.max() >= n_classes:
        raise InputError(f"{path}: unknown class id {int(labels.max())} (classes={n_classes})")
    return labels, n_classes


def write_split(split: InductiveSplit, path: str | Path) -> None:
    with open(path, "w") as fh:
        for section in InductiveSplit.SECTIONS:
            fh.write(f"[{section}]\n")
            fh.writelines(f"{int(i)}\n" for i in getattr(split, section))


def read_split(path: str | Path) -> InductiveSplit:
    sections: dict[str, list[int]] = {s: [] for s in InductiveSplit.SECTIONS}
    current = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            if s.startswith("["):
                current = s.strip("[]")
                if current not in sections:
                    raise InputError(f"{path}:{lineno}: unknown section {s}")
                continue
            if current is None:
                raise InputError(f"{path}:{lineno}: id outside any section")
            sections[current].append(int(s))
    return InductiveSplit(**{k: np.array(v, dtype=np.int64) for k, v in sections.items()})


def _edge_header_n(path: str | Path) -> int | None:
    with open(path) as fh:
        for line in fh:
            s = line.strip()
            if not s:
                continue
            if not s.startswith("#"):
                return None
            m = re.search(r"\bn\s*=\s*(\d+)", s)
            if m:
                return int(m.group(1))
    return None


def load_dataset(edge_path, feature_path, label_path, split_path, name: str | None = None) -> DatasetBundle:
    edges = read_edge_list(edge_path)
    x = read_features(feature_path)
    n_edges = _edge_header_n(edge_path)
    if n_edges is None:
        n_edges = int(edges.max()) + 1 if len(edges) else x.shape[0]
    if x.shape[0] != n_edges:
        raise InputError(f"feature file has {x.shape[0]} rows but the edge list describes {n_edges} nodes")
    g = build_graph(edges, n_edges)
    labels, n_classes = read_labels(label_path)
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    bundle = DatasetBundle(g, x, labels, read_split(split_path), n_classes,
                           name or Path(edge_path).parent.name)
    bundle.validate()
    return bundle


def load_dataset_dir(directory: str | Path) -> DatasetBundle:
    d = Path(directory)
    return load_dataset(*(d / FILES[k] for k in ("edges", "features", "labels", "split")), name=d.name)


def write_dataset(bundle: DatasetBundle, directory: str | Path) -> dict[str, Path]:
    bundle.validate()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / v for k, v in FILES.items()}
    write_edge_list(bundle.graph, paths["edges"])
    write_features(bundle.features, paths["features"])
    write_labels(bundle.labels, paths["labels"], bundle.n_classes)
    write_split(bundle.split, paths["split"])
    return paths


@dataclass
class SbmConfig:
    n: int = 4000
    blocks: int = 4
    p_in: float = 0.02
    p_out: float = 0.002
    f: int = 64
    mu: float = 0.7
    sigma: float = 1.0
    # labeled_train, unlabeled_train, validation, test
    fractions: tuple[float, float, float, float] = (0.05, 0.35, 0.2, 0.4)
    seed: int = 0

    def validate(self) -> None:
        if self.n < 1 or self.blocks < 2:
            raise ConfigError("need n >= 1 and at least two blocks")
        if not 0.0 <= self.p_out <= self.p_in <= 1.0:
            raise ConfigError(f"need 0 <= p_out <= p_in <= 1, got p_in={self.p_in} p_out={self.p_out}")
        if len(self.fractions) != 4 or min(self.fractions) < 0:
            raise ConfigError("fractions must be four nonnegative numbers")
        if sum(self.fractions) > 1.0 + 1e-12:
            raise ConfigError(f"fractions sum to {sum(self.fractions):.4f} > 1")
        if not self.sigma > 0:
            raise ConfigError("sigma must be positive")
        if self.f < self.blocks:
            raise ConfigError("feature dimension must be at least the block count")


PRESETS = {
    "sbm-tiny": SbmConfig(n=120, blocks=3, p_in=0.15, p_out=0.01, f=8, mu=1.0, sigma=1.0,
                          fractions=(0.2, 0.3, 0.2, 0.3)),
    "sbm-small": SbmConfig(n=600, blocks=4, p_in=0.05, p_out=0.005, f=32, mu=1.0, sigma=1.0),
    "sbm-calibrated": SbmConfig(),
}


def _planted_edges(labels: np.ndarray, p_in: float, p_out: float, rng: np.random.Generator) -> np.ndarray:
    n = len(labels)
    chunks = []
    step = 256
    for start in range(0, n, step):
        rows = np.arange(start, min(start + step, n))
        u = rng.random((len(rows), n))
        prob = np.where(labels[rows, None] == labels[None, :], p_in, p_out)
        hit = (u < prob) & (np.arange(n)[None, :] > rows[:, None])
        r, c = np.nonzero(hit)
        chunks.append(np.stack([rows[r], c], axis=1))
    return np.concatenate(chunks) if chunks else np.zeros((0, 2), dtype=np.int64)


def _stratified_split(labels: np.ndarray, fractions, rng: np.random.Generator) -> InductiveSplit:
    parts: list[list[np.ndarray]] = [[], [], [], []]
    for cls in np.unique(labels):
        members = rng.permutation(np.flatnonzero(labels == cls))
        cuts = np.floor(np.cumsum(fractions) * len(members) + 1e-9).astype(int)
        bounds = np.concatenate([[0], cuts])
        for i in range(4):
            parts[i].append(members[bounds[i] : bounds[i + 1]])
    return InductiveSplit(*(np.sort(np.concatenate(p)) for p in parts))


def generate_sbm(cfg: SbmConfig, seed: int | None = None, name: str = "sbm") -> DatasetBundle:
    """Planted partition graph with class-conditional Gaussian features.

    Class means are ``mu * e_class`` rotated into ``f`` dimensions by a
    random orthogonal matrix; noise is isotropic with scale ``sigma``.
    Features are stored at single precision.
    """
    cfg.validate()
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    if cfg.p_in == 0.0 and cfg.p_out == 0.0:
        log.warning("expected degree is zero; the graph has no edges")
    labels = np.arange(cfg.n) % cfg.blocks
    sizes = np.bincount(labels, minlength=cfg.blocks)
    labels = np.repeat(np.arange(cfg.blocks), sizes)
    edges = _planted_edges(labels, cfg.p_in, cfg.p_out, rng)
    g = build_graph(edges, cfg.n)

    rotation, _ = np.linalg.qr(rng.standard_normal((cfg.f, cfg.f)))
    means = cfg.mu * rotation[:, : cfg.blocks].T
    x = means[labels] + cfg.sigma * rng.standard_normal((cfg.n, cfg.f))
    x = x.astype(np.float32).astype(np.float64)

    split = _stratified_split(labels, cfg.fractions, rng)
    stored = labels.astype(np.int64).copy()
    stored[split.unlabeled_train] = UNLABELED
    meta = {"truth": labels.astype(np.int64), "config": cfg}
    return DatasetBundle(g, x, stored, split, cfg.blocks, name, meta)
