"""Teacher-weight learning by bi-level optimization.

The lower level trains the student on fused soft labels by plain gradient descent;
the upper level moves the k x c teacher weight matrix along the hypergradient of the
clean-set loss, obtained by carrying one tangent per weight entry through a window
of unrolled student steps (forward-mode accumulation, Z_t = A_t Z_{t-1} + B_t).
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .cleanselect import CleanNodeSet
from .errors import ValidationError
from .graphdata import Graph, LabelState
from .linalg import Dual, grad_and_tangents, row_softmax, softmax_jvp, spmm, spmm_batched
from .student import StudentParams, forward

log = logging.getLogger(__name__)

FUSIONS = ("weighted", "mean")


@dataclass
class TeacherWeightMatrix:
    W: np.ndarray
    lr: float = 0.5
    updates: int = 0

    @classmethod
    def init(cls, k: int, c: int, value: float = 1.0, lr: float = 0.5) -> "TeacherWeightMatrix":
        return cls(np.full((k, c), float(value)), lr)

    @property
    def shape(self):
        return self.W.shape


@dataclass
class SoftLabels:
    Y: np.ndarray
    tangents: np.ndarray | None = None  # (k*c, n, c), direction j*c + m is d/dW[j, m]

    def as_dual(self, directions: int) -> Dual:
        if directions == 0:
            return Dual.constant(self.Y, 0)
        if self.tangents is None or self.tangents.shape[0] != directions:
            raise ValidationError("soft labels carry no tangents for the requested directions")
        return Dual(self.Y, self.tangents)


def _teacher_probs(P) -> np.ndarray:
    return np.asarray(getattr(P, "P", P), dtype=np.float64)


def fuse_soft_labels(P, W, with_tangents: bool = True) -> SoftLabels:
    """Y = softmax(sum_j W[j] * P_j) row-wise, optionally with d Y / d W[j, m] for every entry."""
    P = _teacher_probs(P)
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    k, n, c = P.shape
    if W.shape != (k, c):
        raise ValidationError(f"weights {W.shape} for {k} teachers and {c} classes")
    Y = row_softmax(np.einsum("jc,jnc->nc", W, P))
    if not with_tangents:
        return SoftLabels(Y)
    # logit tangent of W[j, m] is P_j[:, m] on column m only
    dlogits = np.einsum("jnm,mb->jmnb", P, np.eye(c)).reshape(k * c, n, c)
    return SoftLabels(Y, softmax_jvp(Y, dlogits))


def mean_soft_labels(P) -> SoftLabels:
    return SoftLabels(_teacher_probs(P).mean(axis=0))


@dataclass
class TangentBundle:
    w0: Dual
    w1: Dual
    lr: float
    step: int = 0
    last_loss: float = float("nan")

    @classmethod
    def start(cls, params: StudentParams, directions: int, lr: float) -> "TangentBundle":
        return cls(Dual.constant(params.W0.copy(), directions),
                   Dual.constant(params.W1.copy(), directions), lr)

    @property
    def directions(self) -> int:
        return self.w0.directions

    def params(self, dropout: float = 0.0) -> StudentParams:
        return StudentParams(self.w0.value.copy(), self.w1.value.copy(), dropout)


def inner_step(bundle: TangentBundle, soft: SoftLabels, graph: Graph, mask) -> TangentBundle:
    """One gradient step on the soft-label loss, tangents advanced alongside."""
    res = grad_and_tangents(graph.propagated_features(), graph.A_hat, bundle.w0, bundle.w1,
                            soft.as_dual(bundle.directions), mask)
    (g0, g1), (dg0, dg1) = res.grads, res.grad_tangents
    lr = bundle.lr
    return TangentBundle(
        Dual(bundle.w0.value - lr * g0, bundle.w0.tangents - lr * dg0),
        Dual(bundle.w1.value - lr * g1, bundle.w1.tangents - lr * dg1),
        lr, bundle.step + 1, res.loss)


def _clean_grads(w0, w1, clean: CleanNodeSet, graph: Graph):
    target = clean.one_hot(graph.n, w1.shape[1])
    res = grad_and_tangents(graph.propagated_features(), graph.A_hat, Dual.constant(w0, 0),
                            Dual.constant(w1, 0), Dual.constant(target, 0), clean.nodes)
    return res.loss, res.grads


def upper_loss(bundle, clean: CleanNodeSet, graph: Graph):
    """Mean clean-set cross-entropy of the current student; None when the clean set is empty."""
    if len(clean) == 0:
        log.info("empty clean set; upper update skipped")
        return None
    params = bundle.params() if isinstance(bundle, TangentBundle) else bundle
    return _clean_grads(params.W0, params.W1, clean, graph)[0]


def hypergradient(bundle: TangentBundle, clean: CleanNodeSet, graph: Graph, shape) -> np.ndarray:
    """Contract the clean-loss gradient with the accumulated tangents; returns a (k, c) matrix."""
    k, c = shape
    if bundle.directions != k * c:
        raise ValidationError(f"bundle tracks {bundle.directions} directions, expected {k * c}")
    if bundle.step == 0 or len(clean) == 0:
        return np.zeros((k, c))
    _, (g0, g1) = _clean_grads(bundle.w0.value, bundle.w1.value, clean, graph)
    flat = (np.einsum("dij,ij->d", bundle.w0.tangents, g0)
            + np.einsum("dij,ij->d", bundle.w1.tangents, g1))
    return flat.reshape(k, c)


def upper_step(weights: TeacherWeightMatrix, g) -> TeacherWeightMatrix:
    g = np.asarray(g, dtype=np.float64)
    if g.shape != weights.shape:
        raise ValidationError(f"hypergradient {g.shape} vs weights {weights.shape}")
    if not np.all(np.isfinite(g)):
        warnings.warn("non-finite hypergradient; upper update skipped", RuntimeWarning, stacklevel=2)
        return weights
    return TeacherWeightMatrix(weights.W - weights.lr * g, weights.lr, weights.updates + 1)


def unroll(params: StudentParams, soft: SoftLabels, graph: Graph, mask, steps: int, lr: float,
           directions: int = 0) -> TangentBundle:
    bundle = TangentBundle.start(params, directions, lr)
    for _ in range(steps):
        bundle = inner_step(bundle, soft, graph, mask)
    return bundle


def window_objective(params: StudentParams, P, W, graph: Graph, mask, clean: CleanNodeSet,
                     steps: int, lr: float) -> float:
    """Clean-set loss after ``steps`` inner steps from ``params`` under weights ``W``."""
    soft = fuse_soft_labels(P, W, with_tangents=False)
    return upper_loss(unroll(params, soft, graph, mask, steps, lr), clean, graph)


def _logits_jvp(graph: Graph, W0, W1, v0, v1) -> np.ndarray:
    ax = graph.propagated_features()
    U = ax @ W0
    active = U > 0
    M = spmm(graph.A_hat, np.where(active, U, 0.0))
    dM = spmm(graph.A_hat, np.where(active, ax @ v0, 0.0))
    return dM @ W1 + M @ v1


def reverse_hypergradient(params: StudentParams, P, W, graph: Graph, mask, clean: CleanNodeSet,
                          steps: int, lr: float) -> np.ndarray:
    """Trajectory-storing reverse-mode hypergradient over one window (test oracle).

    Adjoints flow backwards through theta_s = theta_{s-1} - lr * grad(theta_{s-1}, Y);
    the soft-label adjoint is pulled back through the softmax fusion at the end.
    """
    P = _teacher_probs(P)
    W = np.asarray(getattr(W, "W", W), dtype=np.float64)
    k, n, c = P.shape
    soft = fuse_soft_labels(P, W, with_tangents=False)
    Y = soft.Y
    idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
    row_w = np.zeros((n, 1))
    row_w[idx] = 1.0 / len(idx)

    traj = [(params.W0.copy(), params.W1.copy())]
    bundle = TangentBundle.start(params, 0, lr)
    for _ in range(steps):
        bundle = inner_step(bundle, soft, graph, mask)
        traj.append((bundle.w0.value, bundle.w1.value))
    if steps == 0 or len(clean) == 0:
        return np.zeros((k, c))

    _, (a0, a1) = _clean_grads(*traj[-1], clean, graph)
    gY = np.zeros((n, c))
    for W0, W1 in reversed(traj[:-1]):
        # soft-label adjoint: grad depends on Y through (P * rowsum(Y) - Y) * row_w
        dS = _logits_jvp(graph, W0, W1, a0, a1)
        Ps = row_softmax(spmm(graph.A_hat, np.maximum(graph.propagated_features() @ W0, 0.0)) @ W1)
        gY -= lr * row_w * ((dS * Ps).sum(axis=1, keepdims=True) - dS)
        # Hessian-vector product (the Hessian is symmetric)
        hv = grad_and_tangents(graph.propagated_features(), graph.A_hat,
                               Dual(W0, a0[None]), Dual(W1, a1[None]),
                               Dual.constant(Y, 1), mask).grad_tangents
        a0 = a0 - lr * hv[0][0]
        a1 = a1 - lr * hv[1][0]
    gL = Y * (gY - (gY * Y).sum(axis=1, keepdims=True))
    return np.einsum("nm,jnm->jm", gL, P)


@dataclass
class DistillConfig:
    window_length: int = 5
    windows: int = 60
    eta_mu: float = 0.5
    eta_upper: float = 0.5
    w_init: float = 1.0
    fusion: str = "weighted"
    learn_weights: bool = True
    audit_upper: bool = False

    def __post_init__(self):
        if self.window_length < 1 or self.windows < 0:
            raise ValidationError("window_length must be >= 1 and windows >= 0")
        if self.eta_mu < 0 or self.eta_upper < 0:
            raise ValidationError("learning rates must be non-negative")
        if self.fusion not in FUSIONS:
            raise ValidationError(f"fusion must be one of {FUSIONS}")


@dataclass
class WindowRecord:
    window: int
    lower_loss: float
    upper_loss: float | None
    upper_loss_after: float | None
    val_acc: float | None
    weights: np.ndarray


@dataclass
class DistillResult:
    params: StudentParams
    weights: TeacherWeightMatrix
    history: list = field(default_factory=list)
    best_params: StudentParams | None = None
    best_val: float = -1.0


def _val_accuracy(params, graph, val):
    if val is None:
        return None
    val_mask, val_labels = val
    idx = np.flatnonzero(val_mask)
    pred = forward(params, graph)[1].argmax(axis=1)
    return float(np.mean(pred[idx] == np.asarray(val_labels)[idx]))


def run_distillation(ensemble, graph: Graph, labels: LabelState, clean: CleanNodeSet,
                     config: DistillConfig, params: StudentParams,
                     weights: TeacherWeightMatrix | None = None, val=None) -> DistillResult:
    """Alternate t-step student windows with hypergradient updates of the teacher weights.

    ``val`` is an optional ``(mask, labels)`` pair used only to pick the best student.
    """
    P = _teacher_probs(ensemble)
    k, _, c = P.shape
    if weights is None:
        weights = TeacherWeightMatrix.init(k, c, config.w_init, config.eta_upper)
    mask = labels.supervising_mask()
    if not mask.any():
        raise ValidationError("no supervising nodes for the student")
    learn = config.learn_weights and config.fusion == "weighted"
    directions = k * c if learn else 0
    result = DistillResult(params.copy(), weights)
    best_val = _val_accuracy(params, graph, val)
    result.best_params, result.best_val = params.copy(), (-1.0 if best_val is None else best_val)

    for w in range(config.windows):
        if config.fusion == "mean":
            soft = mean_soft_labels(P)
        else:
            soft = fuse_soft_labels(P, weights, with_tangents=learn)
        start = result.params
        bundle = unroll(start, soft, graph, mask, config.window_length, config.eta_mu, directions)
        result.params = bundle.params(start.dropout)
        lw = upper_loss(bundle, clean, graph)
        lw_after = None
        if learn and lw is not None:
            weights = upper_step(weights, hypergradient(bundle, clean, graph, (k, c)))
            if config.audit_upper:
                lw_after = window_objective(start, P, weights, graph, mask, clean,
                                            config.window_length, config.eta_mu)
        acc = _val_accuracy(result.params, graph, val)
        result.history.append(WindowRecord(w, bundle.last_loss, lw, lw_after, acc, weights.W.copy()))
        if acc is not None and acc > result.best_val:
            result.best_val = acc
            result.best_params = result.params.copy()
    result.weights = weights
    return result
