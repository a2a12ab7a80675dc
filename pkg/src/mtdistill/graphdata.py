"""Graphs, label bookkeeping, file ingestion, splits and a stochastic block model generator."""
from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ParseError, ValidationError
from .linalg import SparseAdjacency, as_matrix, spmm


def normalize_adjacency(adj: SparseAdjacency) -> SparseAdjacency:
    """Return D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    if adj.has_self_loops():
        raise ValidationError("adjacency must not store self-loops")
    a = adj.to_scipy() + sp.identity(adj.n, format="csr")
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    scale = sp.diags(inv_sqrt)
    return SparseAdjacency.from_scipy(scale @ a @ scale)


@dataclass(frozen=True, eq=False)
class Graph:
    X: np.ndarray
    A: SparseAdjacency
    A_hat: SparseAdjacency

    @classmethod
    def build(cls, X, A: SparseAdjacency) -> "Graph":
        X = as_matrix(X, "features").copy()
        if X.shape[0] != A.n:
            raise ValidationError(f"{X.shape[0]} feature rows for {A.n} nodes")
        X.setflags(write=False)
        return cls(X, A, normalize_adjacency(A))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def propagated_features(self) -> np.ndarray:
        """A_hat @ X, constant across training."""
        ax = getattr(self, "_ax", None)
        if ax is None:
            ax = spmm(self.A_hat, self.X)
            ax.setflags(write=False)
            object.__setattr__(self, "_ax", ax)
        return ax


class Status(enum.IntEnum):
    UNLABELLED = 0
    ORIGINAL = 1
    FILTERED = 2
    PSEUDO = 3


@dataclass(eq=False)
class LabelState:
    """Per-node label, status and pseudo-label round. Label is -1 where absent."""

    c: int
    labels: np.ndarray
    status: np.ndarray
    rounds: np.ndarray

    @classmethod
    def from_labels(cls, c: int, labels) -> "LabelState":
        labels = np.asarray(labels, dtype=np.int64).copy()
        if labels.size and labels.max() >= c:
            raise ValidationError(f"label >= class count {c}")
        status = np.where(labels >= 0, Status.ORIGINAL, Status.UNLABELLED).astype(np.int8)
        labels[labels < 0] = -1
        return cls(c, labels, status, np.full(len(labels), -1, dtype=np.int64))

    @property
    def n(self) -> int:
        return len(self.labels)

    def copy(self) -> "LabelState":
        return LabelState(self.c, self.labels.copy(), self.status.copy(), self.rounds.copy())

    def supervising_mask(self) -> np.ndarray:
        return (self.status == Status.ORIGINAL) | (self.status == Status.PSEUDO)

    def unlabelled_mask(self) -> np.ndarray:
        return (self.status == Status.UNLABELLED) | (self.status == Status.FILTERED)

    def one_hot(self, mask=None) -> np.ndarray:
        """One-hot rows for supervising nodes (optionally restricted to ``mask``), zero elsewhere."""
        sup = self.supervising_mask()
        if mask is not None:
            sup = sup & np.asarray(mask, dtype=bool)
        out = np.zeros((self.n, self.c))
        idx = np.flatnonzero(sup)
        out[idx, self.labels[idx]] = 1.0
        return out

    def restricted_to(self, mask) -> "LabelState":
        """Copy where only nodes in ``mask`` keep their labels; the rest become unlabelled."""
        out = self.copy()
        drop = ~np.asarray(mask, dtype=bool)
        out.labels[drop] = -1
        out.status[drop] = Status.UNLABELLED
        out.rounds[drop] = -1
        return out

    def check(self):
        sup = self.supervising_mask()
        if np.any(self.labels[sup] < 0) or np.any(self.labels[sup] >= self.c):
            raise ValidationError("supervising node without a valid label")


@dataclass(frozen=True)
class SplitMasks:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def _ceil_frac(x: float) -> int:
    # guards against 0.7 * 10 == 7.000000000000001
    return int(np.ceil(x - 1e-9))


def make_splits(labels: LabelState, fractions, seed: int) -> SplitMasks:
    """Stratified random train/val/test split of the labelled nodes."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(not 0 < f <= 1 for f in fractions):
        raise ValidationError(f"split fractions must be three values in (0,1]: {fractions}")
    if sum(fractions) > 1 + 1e-12:
        raise ValidationError(f"split fractions sum to {sum(fractions)} > 1")
    rng = np.random.default_rng(seed)
    masks = [np.zeros(labels.n, dtype=bool) for _ in range(3)]
    pools = [rng.permutation(np.flatnonzero((labels.labels == k) & (labels.status == Status.ORIGINAL)))
             for k in range(labels.c)]
    sizes = np.array([len(p) for p in pools])
    counts = np.stack([_allocate(f, sizes) for f in fractions], axis=1)
    for k, nodes in enumerate(pools):
        if counts[k, 0] == 0:
            raise ValidationError(f"class {k} has no training nodes after sampling")
        start = 0
        for m, cnt in zip(masks, counts[k]):
            m[nodes[start:start + cnt]] = True
            start += cnt
    return SplitMasks(*masks)


def _allocate(frac: float, sizes: np.ndarray) -> np.ndarray:
    """Per-class counts summing to round(frac * total), each within 1 of frac * size."""
    exact = frac * sizes
    counts = np.floor(exact + 1e-9).astype(np.int64)
    total = int(np.floor(frac * sizes.sum() + 0.5 + 1e-9))
    rest = total - counts.sum()
    if rest > 0:
        # largest remainders first, ties to the lower class index
        order = np.lexsort((np.arange(len(sizes)), -(exact - counts)))
        counts[order[:rest]] += 1
    return counts


def generate_sbm(n: int, c: int, p_intra: float, p_inter: float, d: int,
                 feature_noise: float, seed: int):
    """Balanced c-block SBM with features = one-hot class mean + Gaussian noise."""
    if not 0 <= p_inter < p_intra <= 1:
        raise ValidationError("need 0 <= p_inter < p_intra <= 1")
    if d < c:
        raise ValidationError(f"feature dimension {d} < class count {c}")
    rng = np.random.default_rng(seed)
    y = np.concatenate([np.full(len(b), k) for k, b in enumerate(np.array_split(np.arange(n), c))])
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(y[iu] == y[ju], p_intra, p_inter)
    keep = rng.random(len(iu)) < prob
    A = SparseAdjacency.from_edges(n, iu[keep], ju[keep])
    X = np.zeros((n, d))
    X[np.arange(n), y] = 1.0
    if feature_noise > 0:
        X += feature_noise * rng.standard_normal((n, d))
    return Graph.build(X, A), LabelState.from_labels(c, y)


def _int_field(tok, path, lineno, what):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(path, lineno, f"invalid {what} {tok!r}") from None


def read_edges(path, n: int | None = None):
    src, dst = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            toks = line.split()
            if len(toks) != 2:
                raise ParseError(path, lineno, "expected 'src dst'")
            s = _int_field(toks[0], path, lineno, "node id")
            t = _int_field(toks[1], path, lineno, "node id")
            if s < 0 or t < 0:
                raise ParseError(path, lineno, "negative node id")
            if n is not None and max(s, t) >= n:
                raise ParseError(path, lineno, f"node id outside [0,{n})")
            if s == t:
                raise ParseError(path, lineno, "self-loop")
            src.append(s)
            dst.append(t)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


def read_features(path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            try:
                row = [float(v) for v in rec]
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
            if rows and len(row) != len(rows[0]):
                raise ParseError(path, lineno, f"ragged row: {len(row)} columns, expected {len(rows[0])}")
            if not row or not np.all(np.isfinite(row)):
                raise ParseError(path, lineno, "empty or non-finite row")
            rows.append(row)
    if not rows:
        raise ParseError(path, 0, "no feature rows")
    return np.array(rows, dtype=np.float64)


def read_labels(path, n: int, c: int | None = None):
    entries = []
    with open(path, encoding="utf-8", newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), 1):
            if not rec:
                continue
            if len(rec) != 2:
                raise ParseError(path, lineno, "expected 'node_id,class_id'")
            node = _int_field(rec[0].strip(), path, lineno, "node id")
            cls = _int_field(rec[1].strip(), path, lineno, "class id")
            if not 0 <= node < n:
                raise ParseError(path, lineno, f"node id {node} outside [0,{n})")
            if cls < 0 or (c is not None and cls >= c):
                raise ParseError(path, lineno, f"class id {cls} outside [0,{c})")
            entries.append((node, cls))
    if c is None:
        c = max((cls for _, cls in entries), default=-1) + 1
    y = np.full(n, -1, dtype=np.int64)
    for node, cls in entries:
        y[node] = cls
    return LabelState.from_labels(c, y)


def load_graph(edge_file, feature_file, label_file, num_classes: int | None = None):
    """Read the three plain-text files into a (Graph, LabelState) pair."""
    X = read_features(feature_file)
    n = X.shape[0]
    src, dst = read_edges(edge_file, n)
    graph = Graph.build(X, SparseAdjacency.from_edges(n, src, dst))
    return graph, read_labels(label_file, n, num_classes)


def save_graph(graph: Graph, labels: LabelState, directory, prefix="graph"):
    """Write edges/features/labels files readable by :func:`load_graph`."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = (directory / f"{prefix}.edges", directory / f"{prefix}.features.csv",
             directory / f"{prefix}.labels.csv")
    coo = sp.triu(graph.A.to_scipy(), k=1).tocoo()
    order = np.lexsort((coo.col, coo.row))
    with open(paths[0], "w", encoding="utf-8") as fh:
        for i in order:
            fh.write(f"{coo.row[i]} {coo.col[i]}\n")
    with open(paths[1], "w", encoding="utf-8") as fh:
        for row in graph.X:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(paths[2], "w", encoding="utf-8") as fh:
        for node in np.flatnonzero(labels.labels >= 0):
            fh.write(f"{node},{labels.labels[node]}\n")
    return paths
