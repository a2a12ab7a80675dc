"""Two-layer graph-convolution student."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .graphdata import Graph
from .linalg import Dual, grad_and_tangents, row_softmax, spmm


@dataclass
class StudentParams:
    W0: np.ndarray
    W1: np.ndarray
    dropout: float = 0.5

    @property
    def h(self) -> int:
        return self.W0.shape[1]

    def copy(self) -> "StudentParams":
        return StudentParams(self.W0.copy(), self.W1.copy(), self.dropout)


def init_params(d: int, h: int, c: int, seed: int, dropout: float = 0.5) -> StudentParams:
    """Glorot-uniform weights."""
    rng = np.random.default_rng(seed)
    lim0 = np.sqrt(6.0 / (d + h))
    lim1 = np.sqrt(6.0 / (h + c))
    return StudentParams(rng.uniform(-lim0, lim0, (d, h)), rng.uniform(-lim1, lim1, (h, c)), dropout)


def dropout_mask(n: int, h: int, rate: float, seed) -> np.ndarray:
    """Inverted-dropout keep mask, scaled by 1/(1-rate)."""
    if rate <= 0:
        return np.ones((n, h))
    rng = np.random.default_rng(seed)
    return (rng.random((n, h)) >= rate) / (1.0 - rate)


def forward(params: StudentParams, graph: Graph, train_mode: bool = False, seed=None):
    """Return (Z1, P_S): hidden activations and class probabilities for every node."""
    if params.W0.shape[0] != graph.d or params.W1.shape[0] != params.h:
        raise DimensionError(f"params {params.W0.shape}/{params.W1.shape} vs graph d={graph.d}")
    Z1 = np.maximum(graph.propagated_features() @ params.W0, 0.0)
    if train_mode and params.dropout > 0:
        Z1 = Z1 * dropout_mask(graph.n, params.h, params.dropout, seed)
    P = row_softmax(spmm(graph.A_hat, Z1) @ params.W1)
    return Z1, P


def predict(params: StudentParams, graph: Graph) -> np.ndarray:
    return forward(params, graph)[1].argmax(axis=1)


def loss_and_grads(params: StudentParams, graph: Graph, target, mask, drop=None):
    """Mean masked cross-entropy against ``target`` and its gradients w.r.t. (W0, W1)."""
    res = grad_and_tangents(
        graph.propagated_features(), graph.A_hat,
        Dual.constant(params.W0, 0), Dual.constant(params.W1, 0), Dual.constant(target, 0),
        mask, dropout_mask=drop)
    return res.loss, res.grads
