"""Graph data model, sensitive-group bookkeeping, IO, SBM sampling and edge splits.

Conventions used throughout the package:

* edges are undirected, stored once as ``(u, v)`` with ``u < v``; no self-loops;
* every pair sum over a matrix runs over ordered pairs ``(i, j)`` with
  ``i != j``, so a symmetric matrix counts an undirected edge twice.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FORMAT_TAG = "fairgraph-graph v1"


class GraphFormatError(ValueError):
    """Raised for malformed graph input files."""


class GraphValidationError(ValueError):
    """Raised when graph contents violate an invariant."""


class SplitSizeError(ValueError):
    """Raised when a graph is too small to populate every split."""


def _canonical_edges(edges, n_nodes: int) -> tuple[np.ndarray, int]:
    """Sort, orient ``u < v``, deduplicate; returns (edges, dropped self-loops)."""
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if e.size and (e.min() < 0 or e.max() >= n_nodes):
        raise GraphValidationError(f"edge endpoint out of range [0, {n_nodes})")
    loops = int((e[:, 0] == e[:, 1]).sum())
    e = e[e[:, 0] != e[:, 1]]
    e = np.sort(e, axis=1)
    if e.size:
        e = np.unique(e, axis=0)
    return e.reshape(-1, 2), loops


@dataclass(frozen=True, eq=False)
class Graph:
    n_nodes: int
    edges: np.ndarray
    features: np.ndarray
    sensitive: np.ndarray
    n_groups: int
    synthetic: bool = False

    def __post_init__(self):
        edges, loops = _canonical_edges(self.edges, self.n_nodes)
        if loops:
            raise GraphValidationError("self-loops are not allowed in a Graph")
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(self.n_nodes, -1)
        sens = np.asarray(self.sensitive, dtype=np.int64).reshape(-1)
        if self.n_nodes < 1:
            raise GraphValidationError("graph needs at least one node")
        if feats.shape[0] != self.n_nodes:
            raise GraphValidationError(
                f"feature matrix has {feats.shape[0]} rows for {self.n_nodes} nodes")
        if sens.shape[0] != self.n_nodes:
            raise GraphValidationError(
                f"sensitive vector has {sens.shape[0]} entries for {self.n_nodes} nodes")
        if self.n_groups < 2:
            raise GraphValidationError("at least two sensitive groups are required")
        if sens.min() < 0 or sens.max() >= self.n_groups:
            raise GraphValidationError(f"group ids must lie in [0, {self.n_groups})")
        counts = np.bincount(sens, minlength=self.n_groups)
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise GraphValidationError(f"groups without members: {missing}")
        for arr in (edges, feats, sens):
            arr.setflags(write=False)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "sensitive", sens)

    @property
    def n_edges(self) -> int:
        return int(self.edges.shape[0])

    @property
    def n_features(self) -> int:
        return int(self.features.shape[1])

    def adjacency(self, edges: np.ndarray | None = None) -> np.ndarray:
        """Dense symmetric 0/1 adjacency built from ``edges`` (default: all edges)."""
        e = self.edges if edges is None else np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        a = np.zeros((self.n_nodes, self.n_nodes))
        a[e[:, 0], e[:, 1]] = 1.0
        a[e[:, 1], e[:, 0]] = 1.0
        return a

    def partition(self) -> "SensitivePartition":
        return SensitivePartition.from_labels(self.sensitive, self.n_groups)

    def degrees(self) -> np.ndarray:
        return np.bincount(self.edges.reshape(-1), minlength=self.n_nodes)

    def with_edges(self, edges) -> "Graph":
        return Graph(self.n_nodes, edges, self.features, self.sensitive, self.n_groups,
                     self.synthetic)


@dataclass(frozen=True, eq=False)
class SensitivePartition:
    onehot: np.ndarray
    group_sizes: np.ndarray
    group_members: tuple

    @classmethod
    def from_labels(cls, labels, n_groups: int | None = None) -> "SensitivePartition":
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        k = int(labels.max()) + 1 if n_groups is None else int(n_groups)
        onehot = np.zeros((labels.size, k))
        onehot[np.arange(labels.size), labels] = 1.0
        sizes = onehot.sum(axis=0).astype(np.int64)
        if (sizes == 0).any():
            raise GraphValidationError("every group needs at least one member")
        members = tuple(np.flatnonzero(labels == g) for g in range(k))
        return cls(onehot, sizes, members)

    @property
    def labels(self) -> np.ndarray:
        return self.onehot.argmax(axis=1)

    @property
    def n_nodes(self) -> int:
        return int(self.onehot.shape[0])

    @property
    def n_groups(self) -> int:
        return int(self.onehot.shape[1])

    def same_group(self) -> np.ndarray:
        lab = self.labels
        return lab[:, None] == lab[None, :]


@dataclass(frozen=True)
class GroupEdgeMass:
    """Per-group intra mass, inter mass and total mass of an edge-probability matrix."""
    intra: np.ndarray
    inter: np.ndarray
    total: float

    def __post_init__(self):
        if (np.asarray(self.intra) < 0).any() or (np.asarray(self.inter) < 0).any() or self.total < 0:
            raise GraphValidationError("edge masses must be nonnegative")


@dataclass(frozen=True, eq=False)
class EdgeSplit:
    train_pos: np.ndarray
    val_pos: np.ndarray
    test_pos: np.ndarray
    val_neg: np.ndarray
    test_neg: np.ndarray
    seed: int = 0
    meta: dict = field(default_factory=dict)


# --------------------------------------------------------------------- checks

def check_symmetric_prob(prob, atol: float = 1e-12) -> np.ndarray:
    p = np.asarray(prob, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise GraphValidationError(f"edge probability matrix must be square, got {p.shape}")
    if not np.allclose(p, p.T, atol=atol, rtol=0):
        raise GraphValidationError("edge probability matrix is not symmetric")
    if (p < -atol).any() or (p > 1 + atol).any():
        raise GraphValidationError("edge probabilities must lie in [0, 1]")
    return p


def offdiag(p: np.ndarray) -> np.ndarray:
    out = np.array(p, dtype=np.float64, copy=True)
    np.fill_diagonal(out, 0.0)
    return out


def group_edge_mass(prob, partition: SensitivePartition) -> GroupEdgeMass:
    """Intra/inter mass per group over ordered off-diagonal pairs."""
    p = offdiag(check_symmetric_prob(prob))
    s = partition.onehot
    block = s.T @ p @ s
    intra = np.diag(block).copy()
    inter = (block * (1.0 - np.eye(len(intra)))).sum(axis=1)
    return GroupEdgeMass(intra, inter, float(p.sum()))


# ------------------------------------------------------------------------- IO

def _read_lines(path: Path):
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if line and not line.startswith("#"):
                yield lineno, line


def load_graph(edge_file, feature_file, sensitive_file,
               n_groups: int | None = None) -> tuple[Graph, int]:
    """Read the three-file dataset layout.

    Returns the graph and the number of self-loops that were dropped.
    ``n_groups`` defaults to ``max(label) + 1``; when given it must cover
    every label and every group must be populated.
    """
    sens = []
    for lineno, line in _read_lines(Path(sensitive_file)):
        try:
            sens.append(int(line))
        except ValueError:
            raise GraphFormatError(f"{sensitive_file}:{lineno}: expected an integer label, got {line!r}") from None
    rows = []
    width = None
    for lineno, line in _read_lines(Path(feature_file)):
        try:
            row = [float(x) for x in line.split(",")]
        except ValueError:
            raise GraphFormatError(f"{feature_file}:{lineno}: non-numeric feature value") from None
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise GraphFormatError(f"{feature_file}:{lineno}: expected {width} columns, got {len(row)}")
        rows.append(row)
    n = len(sens)
    if len(rows) != n:
        raise GraphValidationError(f"{len(rows)} feature rows for {n} sensitive labels")
    pairs = []
    for lineno, line in _read_lines(Path(edge_file)):
        parts = line.split()
        if len(parts) != 2:
            raise GraphFormatError(f"{edge_file}:{lineno}: expected 'u v', got {line!r}")
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise GraphFormatError(f"{edge_file}:{lineno}: node ids must be integers") from None
        if not (0 <= u < n and 0 <= v < n):
            raise GraphFormatError(f"{edge_file}:{lineno}: node id out of range [0, {n})")
        pairs.append((u, v))
    k = (max(sens) + 1 if sens else 0) if n_groups is None else n_groups
    if sens and max(sens) >= k:
        raise GraphValidationError(f"label {max(sens)} inconsistent with {k} groups")
    edges, loops = _canonical_edges(pairs, n)
    if loops:
        log.warning("dropped %d self-loop(s) from %s", loops, edge_file)
    feats = np.asarray(rows, dtype=np.float64).reshape(n, width or 0)
    return Graph(n, edges, feats, np.asarray(sens), k), loops


def _fmt(x: float) -> str:
    # repr is the shortest string that round-trips the double exactly
    return repr(float(x))


def save_graph(graph: Graph, path) -> None:
    """Write the single-file text container (header, edges, features, labels)."""
    label_section = "synthetic_sensitive" if graph.synthetic else "sensitive"
    lines = [
        FORMAT_TAG,
        f"N {graph.n_nodes} F {graph.n_features} K {graph.n_groups}",
        f"[edges] {graph.n_edges}",
    ]
    lines += [f"{u} {v}" for u, v in graph.edges]
    lines.append("[features]")
    lines += [" ".join(_fmt(x) for x in row) for row in graph.features]
    lines.append(f"[{label_section}]")
    lines += [str(int(s)) for s in graph.sensitive]
    Path(path).write_text("\n".join(lines) + "\n")


def read_graph(path) -> Graph:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != FORMAT_TAG:
        raise GraphFormatError(f"{path}:1: missing header {FORMAT_TAG!r}")
    try:
        _, n, _, f, _, k = lines[1].split()
        n, f, k = int(n), int(f), int(k)
        tag, m = lines[2].split()
        m = int(m)
    except ValueError:
        raise GraphFormatError(f"{path}:2: malformed size header") from None
    if tag != "[edges]":
        raise GraphFormatError(f"{path}:3: expected [edges] section")
    pos = 3
    try:
        edges = np.array([[int(t) for t in lines[pos + i].split()] for i in range(m)],
                         dtype=np.int64).reshape(-1, 2)
        pos += m
        if lines[pos] != "[features]":
            raise GraphFormatError(f"{path}:{pos + 1}: expected [features] section")
        pos += 1
        feats = np.array([[float(t) for t in lines[pos + i].split()] for i in range(n)],
                         dtype=np.float64).reshape(n, f)
        pos += n
        section = lines[pos]
        if section not in ("[sensitive]", "[synthetic_sensitive]"):
            raise GraphFormatError(f"{path}:{pos + 1}: expected a sensitive section")
        pos += 1
        sens = np.array([int(lines[pos + i]) for i in range(n)], dtype=np.int64)
    except (IndexError, ValueError) as exc:
        raise GraphFormatError(f"{path}: truncated or malformed body near line {pos + 1}: {exc}") from None
    return Graph(n, edges, feats, sens, k, synthetic=section == "[synthetic_sensitive]")


def save_split(split: EdgeSplit, path) -> None:
    lines = [f"fairgraph-split v1 seed {split.seed}"]
    for name in ("train_pos", "val_pos", "test_pos", "val_neg", "test_neg"):
        arr = getattr(split, name)
        lines.append(f"[{name}] {len(arr)}")
        lines += [f"{u} {v}" for u, v in arr]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> EdgeSplit:
    lines = Path(path).read_text().splitlines()
    head = lines[0].split()
    if head[:2] != ["fairgraph-split", "v1"]:
        raise GraphFormatError(f"{path}:1: not a split file")
    seed = int(head[3])
    out, pos = {}, 1
    for name in ("train_pos", "val_pos", "test_pos", "val_neg", "test_neg"):
        tag, m = lines[pos].split()
        if tag != f"[{name}]":
            raise GraphFormatError(f"{path}:{pos + 1}: expected [{name}]")
        m = int(m)
        out[name] = np.array([[int(t) for t in lines[pos + 1 + i].split()] for i in range(m)],
                             dtype=np.int64).reshape(-1, 2)
        pos += m + 1
    return EdgeSplit(seed=seed, **out)


# ------------------------------------------------------------------ generation

def sbm_generate(group_sizes, intra_p: float, inter_p: float, feature_dim: int,
                 seed: int, feature_shift: float = 0.35, base_rate: float = 0.1) -> Graph:
    """Sample a stochastic block model with binary, group-correlated features.

    Each node's features are independent Bernoulli draws whose rates are a
    common base rate plus a group-specific shift on a random subset of the
    columns, so feature profiles separate the groups.
    """
    sizes = np.asarray(group_sizes, dtype=np.int64)
    if sizes.size == 0 or (sizes <= 0).any():
        raise ValueError("group_sizes must be nonempty and positive")
    if not (0 <= intra_p <= 1 and 0 <= inter_p <= 1):
        raise ValueError("edge probabilities must lie in [0, 1]")
    if len(sizes) < 2:
        raise ValueError("an SBM needs at least two groups")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(len(sizes)), sizes)
    n = int(sizes.sum())
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(labels[iu] == labels[ju], intra_p, inter_p)
    keep = rng.random(iu.size) < p
    edges = np.stack([iu[keep], ju[keep]], axis=1)

    rates = np.full((len(sizes), feature_dim), base_rate)
    for g in range(len(sizes)):
        cols = rng.random(feature_dim) < 0.5
        rates[g, cols] += feature_shift
    feats = (rng.random((n, feature_dim)) < rates[labels]).astype(np.float64)
    return Graph(n, edges, feats, labels, len(sizes))


# --------------------------------------------------------------------- splits

def _sample_non_edges(n: int, forbidden: set, count: int, rng: np.random.Generator) -> np.ndarray:
    total = n * (n - 1) // 2
    if count > total - len(forbidden):
        raise SplitSizeError(f"cannot draw {count} negatives: only {total - len(forbidden)} non-edges")
    chosen: set = set()
    out = []
    while len(out) < count:
        draw = rng.integers(0, n, size=(2 * (count - len(out)) + 8, 2))
        for u, v in draw:
            if u == v:
                continue
            key = (min(u, v), max(u, v))
            if key in forbidden or key in chosen:
                continue
            chosen.add(key)
            out.append(key)
            if len(out) == count:
                break
    return np.asarray(out, dtype=np.int64).reshape(-1, 2)


def split_edges(graph: Graph, train_frac: float = 0.8, seed: int = 0) -> EdgeSplit:
    """Shuffle edges into train/val/test; held-out edges split evenly."""
    if not 0 < train_frac < 1:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    m = graph.n_edges
    if m < 5:
        raise SplitSizeError(f"graph has {m} edges; at least 5 are needed")
    n_train = int(round(train_frac * m))
    held = m - n_train
    n_val = held // 2
    n_test = held - n_val
    if n_train < 1 or n_val < 1 or n_test < 1:
        raise SplitSizeError(f"{m} edges cannot populate train/val/test at train_frac={train_frac}")
    rng = np.random.default_rng(seed)
    order = rng.permutation(m)
    e = graph.edges[order]
    train, val, test = e[:n_train], e[n_train:n_train + n_val], e[n_train + n_val:]
    forbidden = {(int(u), int(v)) for u, v in graph.edges}
    neg = _sample_non_edges(graph.n_nodes, forbidden, n_val + n_test, rng)
    return EdgeSplit(train, val, test, neg[:n_val], neg[n_val:], seed)
