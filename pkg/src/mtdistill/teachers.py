"""Teacher construction: label-free graph encoders plus single-layer softmax classifiers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from .errors import ValidationError
from .graphdata import Graph, LabelState
from .linalg import LOG_EPS, row_softmax, spmm
from .optim import Adam


class TeacherEncoder(Protocol):
    name: str

    def fit(self, graph: Graph, seed: int | None = None) -> "TeacherEncoder": ...

    def embed(self, graph: Graph) -> np.ndarray: ...


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softplus(x):
    return np.logaddexp(0.0, x)


def orthonormal_projection(d, dim, rng) -> np.ndarray:
    """Random d x dim matrix with orthonormal columns (dim <= d) or rows (dim > d)."""
    g = rng.standard_normal((max(d, dim), min(d, dim)))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))
    return q if d >= dim else q.T


class PropagationEncoder:
    """Two rounds of normalized propagation followed by a fixed random projection."""

    name = "propagation"

    def __init__(self, dim, seed=0, projection=None):
        self.dim = dim
        self.seed = seed
        self.projection = None if projection is None else np.asarray(projection, dtype=np.float64)
        self._fixed = projection is not None

    def fit(self, graph, seed=None):
        if not self._fixed:
            rng = np.random.default_rng(self.seed if seed is None else seed)
            self.projection = orthonormal_projection(graph.d, self.dim, rng)
        return self

    def embed(self, graph):
        return spmm(graph.A_hat, graph.propagated_features()) @ self.projection


class ContrastiveEncoder:
    """One graph-convolution layer trained to tell real nodes from feature-shuffled ones.

    Scores are bilinear in the node embedding and the sigmoid of the mean embedding;
    the summary vector is held fixed within each gradient step.
    """

    name = "contrastive"

    def __init__(self, dim, seed=1, epochs=150, lr=0.01):
        self.dim = dim
        self.seed = seed
        self.epochs = epochs
        self.lr = lr
        self.W = None
        self.B = None
        self.loss_history: list[float] = []

    @staticmethod
    def summary(ax, W):
        return _sigmoid(np.maximum(ax @ W, 0.0).mean(axis=0))

    @staticmethod
    def loss_and_grads(ax, ax_corrupt, W, B, s):
        n = ax.shape[0]
        pre = ax @ W
        pre_c = ax_corrupt @ W
        H = np.maximum(pre, 0.0)
        Hc = np.maximum(pre_c, 0.0)
        v = B @ s
        a = H @ v
        b = Hc @ v
        loss = float(_softplus(-a).mean() + _softplus(b).mean())
        da = -_sigmoid(-a) / n
        db = _sigmoid(b) / n
        dH = np.outer(da, v) * (pre > 0)
        dHc = np.outer(db, v) * (pre_c > 0)
        gW = ax.T @ dH + ax_corrupt.T @ dHc
        gB = np.outer(H.T @ da + Hc.T @ db, s)
        return loss, gW, gB

    def fit(self, graph, seed=None):
        rng = np.random.default_rng(self.seed if seed is None else seed)
        self.W = _glorot(rng, graph.d, self.dim)
        self.B = np.eye(self.dim)
        ax = graph.propagated_features()
        opt = Adam([self.W, self.B], lr=self.lr)
        self.loss_history = []
        for _ in range(self.epochs):
            perm = rng.permutation(graph.n)
            ax_c = spmm(graph.A_hat, graph.X[perm])
            s = self.summary(ax, self.W)
            loss, gW, gB = self.loss_and_grads(ax, ax_c, self.W, self.B, s)
            self.loss_history.append(loss)
            opt.step([gW, gB])
        return self

    def embed(self, graph):
        return np.maximum(graph.propagated_features() @ self.W, 0.0)


class ReconstructionEncoder:
    """One linear graph-convolution layer whose inner products predict edges (logistic loss)."""

    name = "reconstruction"

    def __init__(self, dim, seed=2, epochs=150, lr=0.01, negatives=1):
        self.dim = dim
        self.seed = seed
        self.epochs = epochs
        self.lr = lr
        self.negatives = negatives
        self.W = None
        self.loss_history: list[float] = []

    @staticmethod
    def loss_and_grad(ax, W, pairs, targets):
        H = ax @ W
        i, j = pairs
        s = np.einsum("pd,pd->p", H[i], H[j])
        loss = float(np.mean(_softplus(s) - targets * s))
        ds = (_sigmoid(s) - targets) / len(s)
        dH = np.zeros_like(H)
        np.add.at(dH, i, ds[:, None] * H[j])
        np.add.at(dH, j, ds[:, None] * H[i])
        return loss, ax.T @ dH

    def fit(self, graph, seed=None):
        rng = np.random.default_rng(self.seed if seed is None else seed)
        self.W = _glorot(rng, graph.d, self.dim)
        ax = graph.propagated_features()
        coo = graph.A.to_scipy().tocoo()
        upper = coo.row < coo.col
        pos_i, pos_j = coo.row[upper], coo.col[upper]
        n_neg = max(1, self.negatives * len(pos_i))
        opt = Adam([self.W], lr=self.lr)
        self.loss_history = []
        for _ in range(self.epochs):
            neg_i = rng.integers(0, graph.n, n_neg)
            neg_j = rng.integers(0, graph.n, n_neg)
            pairs = (np.concatenate([pos_i, neg_i]), np.concatenate([pos_j, neg_j]))
            targets = np.concatenate([np.ones(len(pos_i)), np.zeros(n_neg)])
            loss, gW = self.loss_and_grad(ax, self.W, pairs, targets)
            self.loss_history.append(loss)
            opt.step([gW])
        return self

    def embed(self, graph):
        return graph.propagated_features() @ self.W


def builtin_encoders(dim: int, seed: int) -> list:
    return [
        PropagationEncoder(dim, seed=seed),
        ContrastiveEncoder(dim, seed=seed + 1),
        ReconstructionEncoder(dim, seed=seed + 2),
    ]


def classifier_loss_grad(H, weights, targets, idx):
    """Mean cross-entropy of softmax(H @ weights) on rows ``idx`` and its gradient."""
    P = row_softmax(H[idx] @ weights)
    Y = targets[idx]
    loss = float(-(Y * np.log(np.maximum(P, LOG_EPS))).sum(axis=1).mean())
    grad = H[idx].T @ (P - Y) / len(idx)
    return loss, grad


def train_classifier(H, labels: LabelState, mask=None, epochs=300, lr=0.05) -> np.ndarray:
    """Zero-initialized linear softmax classifier fitted by full-batch gradient descent."""
    H = np.asarray(H, dtype=np.float64)
    sup = labels.supervising_mask()
    if mask is not None:
        sup = sup & np.asarray(mask, dtype=bool)
    idx = np.flatnonzero(sup)
    missing = sorted(set(range(labels.c)) - set(labels.labels[idx].tolist()))
    if missing:
        raise ValidationError(f"classes {missing} have no supervising node")
    Y = labels.one_hot()
    weights = np.zeros((H.shape[1], labels.c))
    for _ in range(epochs):
        _, grad = classifier_loss_grad(H, weights, Y, idx)
        weights -= lr * grad
    return weights


@dataclass
class TeacherEnsemble:
    embeddings: list
    classifiers: list
    P: np.ndarray = field(init=False)

    def __post_init__(self):
        if len(self.embeddings) != len(self.classifiers) or not self.embeddings:
            raise ValidationError("need one classifier per teacher and at least one teacher")
        n = self.embeddings[0].shape[0]
        if any(h.shape[0] != n for h in self.embeddings):
            raise ValidationError("teacher embeddings differ in row count")
        self.P = np.stack([row_softmax(h @ w) for h, w in zip(self.embeddings, self.classifiers)])

    @property
    def k(self) -> int:
        return self.P.shape[0]

    @property
    def c(self) -> int:
        return self.P.shape[2]


def ensemble_predict(encoders, classifiers, graph: Graph) -> TeacherEnsemble:
    return TeacherEnsemble([enc.embed(graph) for enc in encoders], list(classifiers))
