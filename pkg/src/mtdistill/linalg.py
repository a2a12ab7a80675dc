"""Dense/sparse kernels, hand-derived student gradients and forward-over-reverse tangents.

Dense matrices are plain 2-D ``float64`` numpy arrays. Tangent stacks carry a
leading direction axis: a value of shape ``(r, c)`` has tangents ``(D, r, c)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import DimensionError, NumericError, ValidationError

LOG_EPS = 1e-12


def as_matrix(a, name="matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


@dataclass(frozen=True, eq=False)
class SparseAdjacency:
    """Symmetric adjacency in compressed-row layout."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        indptr = np.asarray(self.indptr, dtype=np.int64)
        indices = np.asarray(self.indices, dtype=np.int64)
        values = np.asarray(self.values, dtype=np.float64)
        if indptr.shape != (self.n + 1,) or indptr[0] != 0 or indptr[-1] != len(indices):
            raise ValidationError("malformed row offsets")
        if len(values) != len(indices):
            raise ValidationError("values and column indices differ in length")
        if len(indices) and (indices.min() < 0 or indices.max() >= self.n):
            raise ValidationError("column index out of range")
        for i in range(self.n):
            row = indices[indptr[i]:indptr[i + 1]]
            if np.any(np.diff(row) <= 0):
                raise ValidationError(f"row {i}: column indices not strictly increasing")
        csr = sp.csr_matrix((values, indices, indptr), shape=(self.n, self.n))
        diff = csr - csr.T
        if diff.nnz and np.abs(diff.data).max() > 0:
            raise ValidationError("adjacency is not symmetric")
        for name, arr in (("indptr", indptr), ("indices", indices), ("values", values)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_csr", csr)

    @classmethod
    def from_scipy(cls, m) -> "SparseAdjacency":
        csr = sp.csr_matrix(m, dtype=np.float64)
        csr.sum_duplicates()
        csr.sort_indices()
        csr.eliminate_zeros()
        return cls(csr.shape[0], csr.indptr, csr.indices, csr.data)

    @classmethod
    def from_edges(cls, n, src, dst, values=None) -> "SparseAdjacency":
        """Build from an undirected edge list; duplicates collapse to one entry of value 1.0."""
        src = np.asarray(src, dtype=np.int64)
        dst = np.asarray(dst, dtype=np.int64)
        if values is None:
            rows = np.concatenate([src, dst])
            cols = np.concatenate([dst, src])
            m = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n)).tocsr()
            m.sum_duplicates()
            m.data[:] = 1.0
            return cls.from_scipy(m)
        m = sp.coo_matrix((np.asarray(values, dtype=np.float64), (src, dst)), shape=(n, n))
        return cls.from_scipy(m)

    @classmethod
    def from_dense(cls, a) -> "SparseAdjacency":
        return cls.from_scipy(sp.csr_matrix(as_matrix(a)))

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def to_scipy(self) -> sp.csr_matrix:
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def has_self_loops(self) -> bool:
        return bool(np.any(self._csr.diagonal() != 0))


def spmm(adj: SparseAdjacency, m) -> np.ndarray:
    m = as_matrix(m, "m")
    if adj.n != m.shape[0]:
        raise DimensionError(f"spmm: adjacency n={adj.n} x {m.shape}")
    return np.asarray(adj.to_scipy() @ m)


def spmm_batched(adj: SparseAdjacency, t: np.ndarray) -> np.ndarray:
    """Apply ``adj`` to every slice of a ``(D, n, k)`` stack."""
    d, n, k = t.shape
    if n != adj.n:
        raise DimensionError(f"spmm: adjacency n={adj.n} x stack {t.shape}")
    flat = t.transpose(1, 0, 2).reshape(n, d * k)
    out = np.asarray(adj.to_scipy() @ flat)
    return out.reshape(n, d, k).transpose(1, 0, 2)


def row_softmax(m) -> np.ndarray:
    m = as_matrix(m)
    z = m - m.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_jvp(p: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """Tangent of ``row_softmax`` at output ``p`` along logit tangents ``dz`` (any leading axes)."""
    pd = p * dz
    return pd - p * pd.sum(axis=-1, keepdims=True)


def _mask_index(mask, n) -> np.ndarray:
    idx = np.asarray(mask)
    if idx.dtype == bool:
        if idx.shape != (n,):
            raise DimensionError(f"boolean mask of shape {idx.shape} for {n} rows")
        idx = np.flatnonzero(idx)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.size == 0:
        raise ValidationError("empty mask")
    return idx


def cross_entropy(pred, target, mask) -> float:
    """Mean over masked rows of ``-sum_c target * log(max(pred, eps))``."""
    pred = as_matrix(pred, "pred")
    target = as_matrix(target, "target")
    if pred.shape != target.shape:
        raise DimensionError(f"cross_entropy: {pred.shape} vs {target.shape}")
    idx = _mask_index(mask, pred.shape[0])
    logp = np.log(np.maximum(pred[idx], LOG_EPS))
    return float(-(target[idx] * logp).sum(axis=1).mean())


@dataclass
class Dual:
    """A matrix value with one tangent slice per tracked upper-level direction."""

    value: np.ndarray
    tangents: np.ndarray

    def __post_init__(self):
        self.value = as_matrix(self.value, "dual value")
        self.tangents = np.asarray(self.tangents, dtype=np.float64)
        if self.tangents.ndim != 3 or self.tangents.shape[1:] != self.value.shape:
            raise DimensionError(
                f"tangents {self.tangents.shape} do not match value {self.value.shape}")

    @classmethod
    def constant(cls, value, directions: int) -> "Dual":
        value = as_matrix(value)
        return cls(value, np.zeros((directions,) + value.shape))

    @property
    def directions(self) -> int:
        return self.tangents.shape[0]


class GradResult(NamedTuple):
    loss: float
    grads: tuple
    grad_tangents: tuple


def _check(stage, *arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError(stage)


def grad_and_tangents(ax, adj: SparseAdjacency, w0: Dual, w1: Dual, target: Dual, mask,
                      dropout_mask=None) -> GradResult:
    """Loss, gradients and gradient tangents for the two-layer graph-convolution student.

    Forward: ``U = ax @ W0``, ``Z1 = relu(U) * dropout_mask``, ``S = adj @ Z1 @ W1``,
    ``P = softmax(S)``, loss = mean masked cross-entropy of ``P`` against ``target``
    where ``ax`` is the precomputed ``adj @ X``.

    ``grad_tangents[i][d]`` is the directional derivative of ``grads[i]`` when
    ``(W0, W1, target)`` move along their ``d``-th tangents. The gradient is that of
    the unclamped loss; the log clamp only affects the reported value.
    """
    ax = as_matrix(ax, "ax")
    W0, W1, Y = w0.value, w1.value, target.value
    D = w0.directions
    if w1.directions != D or target.directions != D:
        raise DimensionError("tangent direction counts disagree")
    n = ax.shape[0]
    if ax.shape[1] != W0.shape[0] or W0.shape[1] != W1.shape[0] or Y.shape != (n, W1.shape[1]):
        raise DimensionError(f"shapes ax{ax.shape} W0{W0.shape} W1{W1.shape} target{Y.shape}")
    idx = _mask_index(mask, n)
    row_w = np.zeros((n, 1))
    row_w[idx] = 1.0 / len(idx)
    dm = np.ones((1, 1)) if dropout_mask is None else np.asarray(dropout_mask, dtype=np.float64)

    U = ax @ W0
    active = (U > 0).astype(np.float64)
    Z1 = U * active * dm
    M = spmm(adj, Z1)
    S = M @ W1
    _check("student forward", S)
    P = row_softmax(S)
    loss = float(-(Y[idx] * np.log(np.maximum(P[idx], LOG_EPS))).sum(axis=1).mean())

    # reverse sweep; Y rows are stochastic so dL/dS = (P*sum(Y) - Y) per row
    GS = (P * Y.sum(axis=1, keepdims=True) - Y) * row_w
    g1 = M.T @ GS
    GM = GS @ W1.T
    GU = spmm(adj, GM) * dm * active
    g0 = ax.T @ GU
    _check("student gradient", g0, g1)

    # forward tangents through the reverse sweep
    dW0, dW1, dY = w0.tangents, w1.tangents, target.tangents
    dU = ax @ dW0
    dZ1 = dU * active * dm
    dM = spmm_batched(adj, dZ1)
    dS = dM @ W1 + M @ dW1
    dP = softmax_jvp(P, dS)
    dGS = (dP * Y.sum(axis=1, keepdims=True) + P * dY.sum(axis=2, keepdims=True) - dY) * row_w
    dg1 = dM.transpose(0, 2, 1) @ GS + M.T @ dGS
    dGM = dGS @ W1.T + GS @ dW1.transpose(0, 2, 1)
    dGU = spmm_batched(adj, dGM) * dm * active
    dg0 = ax.T @ dGU
    _check("student gradient tangent", dg0, dg1)
    return GradResult(loss, (g0, g1), (dg0, dg1))
