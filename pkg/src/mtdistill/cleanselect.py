"""Clean node set for the upper level: teacher-consensus unlabelled nodes plus low-loss labelled nodes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ValidationError
from .graphdata import LabelState, _ceil_frac
from .linalg import LOG_EPS

UNLABELLED_CONSENSUS = "unlabelled-consensus"
LABELLED_LOWLOSS = "labelled-lowloss"


@dataclass(frozen=True)
class CleanNodeSet:
    nodes: np.ndarray
    labels: np.ndarray
    provenance: tuple

    def __post_init__(self):
        if len(np.unique(self.nodes)) != len(self.nodes):
            raise ValidationError("duplicate node in clean set")

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def empty(cls) -> "CleanNodeSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64), ())

    def one_hot(self, n: int, c: int) -> np.ndarray:
        out = np.zeros((n, c))
        out[self.nodes, self.labels] = 1.0
        return out


def _probs(P) -> np.ndarray:
    return np.asarray(getattr(P, "P", P), dtype=np.float64)


def consensus_candidates(P, unlabelled_mask):
    """Unlabelled nodes on which every teacher has the same argmax. Returns (nodes, classes)."""
    P = _probs(P)
    arg = P.argmax(axis=2)  # lowest index wins ties
    agree = np.all(arg == arg[0], axis=0) & np.asarray(unlabelled_mask, dtype=bool)
    nodes = np.flatnonzero(agree)
    return nodes, arg[0, nodes]


def embedding_score(embeddings, nodes, classes, beta1: int) -> np.ndarray:
    """Sum over teachers of distances to the beta1 nearest same-class candidates (per teacher)."""
    if beta1 < 1:
        raise ValidationError("beta1 must be >= 1")
    nodes = np.asarray(nodes, dtype=np.int64)
    classes = np.asarray(classes)
    xi = np.zeros(len(nodes))
    for H in embeddings:
        E = np.asarray(H, dtype=np.float64)[nodes]
        for k in np.unique(classes):
            members = np.flatnonzero(classes == k)
            if len(members) < 2:
                continue
            dist = cdist(E[members], E[members])
            np.fill_diagonal(dist, np.inf)
            m = min(beta1, len(members) - 1)
            nearest = np.sort(dist, axis=1)[:, :m]
            xi[members] += nearest.sum(axis=1)
    return xi


def _per_class_smallest(nodes, classes, keys, count_for):
    """Per class, the ``count_for(class, size)`` entries with smallest key, ties by node id."""
    chosen = []
    for k in np.unique(classes):
        sel = np.flatnonzero(classes == k)
        order = np.lexsort((nodes[sel], keys[sel]))
        chosen.extend(sel[order[:count_for(k, len(sel))]].tolist())
    return np.array(sorted(chosen, key=lambda i: nodes[i]), dtype=np.int64)


def select_clean_unlabelled(nodes, xi, classes, beta2: int) -> CleanNodeSet:
    if beta2 < 0:
        raise ValidationError("beta2 must be >= 0")
    nodes = np.asarray(nodes, dtype=np.int64)
    classes = np.asarray(classes, dtype=np.int64)
    pick = _per_class_smallest(nodes, classes, np.asarray(xi, dtype=np.float64),
                               lambda _k, _size: beta2)
    if len(pick) == 0:
        return CleanNodeSet.empty()
    return CleanNodeSet(nodes[pick], classes[pick], (UNLABELLED_CONSENSUS,) * len(pick))


def teacher_label_loss(P, labels: LabelState, nodes) -> np.ndarray:
    """Summed teacher cross-entropy of each node's current label."""
    P = _probs(P)
    nodes = np.asarray(nodes, dtype=np.int64)
    p = P[:, nodes, labels.labels[nodes]]
    return -np.log(np.maximum(p, LOG_EPS)).sum(axis=0)


def select_clean_labelled(P, labels: LabelState, mask, alpha: float) -> CleanNodeSet:
    """Per labelled class, the ceil(alpha% * size) nodes with lowest summed teacher loss."""
    if not 0 <= alpha <= 100:
        raise ValidationError(f"alpha {alpha} outside [0,100]")
    sup = labels.supervising_mask()
    if mask is not None:
        sup = sup & np.asarray(mask, dtype=bool)
    nodes = np.flatnonzero(sup)
    if len(nodes) == 0:
        return CleanNodeSet.empty()
    classes = labels.labels[nodes]
    loss = teacher_label_loss(P, labels, nodes)
    pick = _per_class_smallest(nodes, classes, loss,
                               lambda _k, size: _ceil_frac(alpha * size / 100.0))
    if len(pick) == 0:
        return CleanNodeSet.empty()
    return CleanNodeSet(nodes[pick], classes[pick], (LABELLED_LOWLOSS,) * len(pick))


def build_clean_set(*parts: CleanNodeSet) -> CleanNodeSet:
    """Union of parts; a node present in several keeps its labelled-lowloss entry."""
    entries = {}
    for part in parts:
        for node, y, prov in zip(part.nodes.tolist(), part.labels.tolist(), part.provenance):
            if node not in entries or prov == LABELLED_LOWLOSS:
                entries[node] = (y, prov)
    nodes = sorted(entries)
    if not nodes:
        return CleanNodeSet.empty()
    return CleanNodeSet(np.array(nodes, dtype=np.int64),
                        np.array([entries[v][0] for v in nodes], dtype=np.int64),
                        tuple(entries[v][1] for v in nodes))


def clean_set_for(ensemble, labels: LabelState, beta1: int, beta2: int, alpha: float) -> CleanNodeSet:
    """Both selection paths on a teacher ensemble."""
    nodes, classes = consensus_candidates(ensemble, labels.unlabelled_mask())
    if len(nodes):
        xi = embedding_score(ensemble.embeddings, nodes, classes, beta1)
        unl = select_clean_unlabelled(nodes, xi, classes, beta2)
    else:
        unl = CleanNodeSet.empty()
    return build_clean_set(unl, select_clean_labelled(ensemble, labels, None, alpha))
