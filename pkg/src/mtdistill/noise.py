"""Label corruption through an explicit class transition matrix."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .graphdata import LabelState, Status

KINDS = ("uniform", "pair")


@dataclass(frozen=True)
class NoiseSpec:
    kind: str
    p: float
    c: int
    Q: np.ndarray
    pair_map: tuple | None = None


@dataclass(frozen=True)
class GroundTruth:
    """Clean labels kept aside for evaluation; training code never receives this object."""

    labels: np.ndarray

    def accuracy(self, pred, mask) -> float:
        idx = np.flatnonzero(mask)
        return float(np.mean(np.asarray(pred)[idx] == self.labels[idx]))


def build_transition(kind: str, p: float, c: int, pair_map=None) -> NoiseSpec:
    if kind not in KINDS:
        raise ValidationError(f"unknown noise kind {kind!r}")
    if c < 2:
        raise ValidationError("noise needs at least two classes")
    if not 0 <= p <= 1:
        raise ValidationError(f"noise rate {p} outside [0,1]")
    Q = np.zeros((c, c))
    if kind == "uniform":
        Q[:] = p / (c - 1)
        np.fill_diagonal(Q, 1 - p)
    else:
        if p >= 0.5:
            warnings.warn("pair noise rate >= 0.5 makes the pair class dominant", stacklevel=2)
        pairs = tuple(range(1, c)) + (0,) if pair_map is None else tuple(int(v) for v in pair_map)
        if len(pairs) != c or any(not 0 <= v < c or v == i for i, v in enumerate(pairs)):
            raise ValidationError(f"invalid pair map {pairs}")
        np.fill_diagonal(Q, 1 - p)
        Q[np.arange(c), pairs] += p
        pair_map = pairs
    return NoiseSpec(kind, float(p), c, Q, pair_map)


def corrupt(labels: LabelState, mask, spec: NoiseSpec, seed: int):
    """Resample each masked label from its row of Q. Returns (noisy LabelState, GroundTruth)."""
    mask = np.asarray(mask, dtype=bool)
    if np.any(labels.labels[mask] < 0):
        raise ValidationError("noise mask covers unlabelled nodes")
    truth = GroundTruth(labels.labels.copy())
    out = labels.copy()
    idx = np.flatnonzero(mask)
    rng = np.random.default_rng(seed)
    u = rng.random(len(idx))
    cdf = np.cumsum(spec.Q[labels.labels[idx]], axis=1)
    new = (u[:, None] >= cdf).sum(axis=1)
    out.labels[idx] = np.minimum(new, spec.c - 1)
    out.status[idx] = Status.ORIGINAL
    return out, truth
