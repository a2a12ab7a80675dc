"""Per-class loss filtering of suspect labels and two-source pseudo-label selection."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graphdata import LabelState, Status, _ceil_frac
from .linalg import LOG_EPS


@dataclass(frozen=True)
class Candidate:
    node: int
    label: int
    confidence: float


def student_label_loss(P_S, labels: LabelState, nodes) -> np.ndarray:
    nodes = np.asarray(nodes, dtype=np.int64)
    return -np.log(np.maximum(np.asarray(P_S)[nodes, labels.labels[nodes]], LOG_EPS))


def removal_count(size: int, r: float) -> int:
    return min(_ceil_frac(size * r), size - 1) if size else 0


def filter_noisy(P_S, labels: LabelState, mask, r: float):
    """Mark the highest-loss supervising nodes of each class as filtered.

    Per class with delta supervising nodes, exactly min(ceil(delta*r), delta-1) are removed
    (descending loss, ties by lowest node id). Returns (new LabelState, removed nodes).
    """
    if not 0 <= r < 1:
        raise ValidationError(f"filter rate {r} outside [0,1)")
    sup = labels.supervising_mask()
    if mask is not None:
        sup = sup & np.asarray(mask, dtype=bool)
    nodes = np.flatnonzero(sup)
    loss = student_label_loss(P_S, labels, nodes)
    removed = []
    for k in range(labels.c):
        sel = np.flatnonzero(labels.labels[nodes] == k)
        order = np.lexsort((nodes[sel], -loss[sel]))
        removed.extend(nodes[sel[order[:removal_count(len(sel), r)]]].tolist())
    removed = np.array(sorted(removed), dtype=np.int64)
    out = labels.copy()
    out.status[removed] = Status.FILTERED
    return out, removed


def _top_per_class(probs, labels: LabelState, rho: int):
    if rho < 0:
        raise ValidationError("rho must be >= 0")
    nodes = np.flatnonzero(labels.unlabelled_mask())
    probs = np.asarray(probs, dtype=np.float64)[nodes]
    pred = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    out = []
    for k in np.unique(pred):
        sel = np.flatnonzero(pred == k)
        order = np.lexsort((nodes[sel], -conf[sel]))
        out.extend(Candidate(int(nodes[i]), int(k), float(conf[i])) for i in sel[order[:rho]])
    return sorted(out, key=lambda cand: cand.node)


def pseudo_select_student(P_S, labels: LabelState, rho: int) -> list:
    """Top-rho most confident student predictions per predicted class among unlabelled/filtered nodes."""
    return _top_per_class(P_S, labels, rho)


def pseudo_select_teacher(P, labels: LabelState, rho: int) -> list:
    """Same rule on the summed (unnormalized) teacher probabilities."""
    P = np.asarray(getattr(P, "P", P), dtype=np.float64)
    return _top_per_class(P.sum(axis=0), labels, rho)


def apply_pseudo(labels: LabelState, student_cands, teacher_cands, round_index: int = 0):
    """Add candidates as pseudo labels; a node proposed with conflicting labels is skipped.

    Returns (new LabelState, added nodes).
    """
    proposals: dict[int, set] = {}
    for cand in list(student_cands) + list(teacher_cands):
        proposals.setdefault(cand.node, set()).add(cand.label)
    out = labels.copy()
    open_nodes = labels.unlabelled_mask()
    added = []
    for node in sorted(proposals):
        ys = proposals[node]
        if len(ys) != 1:
            continue
        if not open_nodes[node]:
            raise ValidationError(f"pseudo candidate {node} already supervises")
        out.labels[node] = ys.pop()
        out.status[node] = Status.PSEUDO
        out.rounds[node] = round_index
        added.append(node)
    return out, np.array(added, dtype=np.int64)
