import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mtdistill.errors import DimensionError, NumericError, ValidationError
from mtdistill.linalg import (
    Dual, SparseAdjacency, cross_entropy, grad_and_tangents, matmul, row_softmax, spmm,
)
from oracles import central_diff, rel_err


def test_matmul_examples():
    M = np.array([[1.5, -2.0], [0.25, 3.0]])
    assert np.array_equal(matmul(np.eye(2), M), M)
    assert np.array_equal(matmul([[1, 2], [3, 4]], [[0], [1]]), [[2], [4]])
    assert np.array_equal(matmul(np.zeros((2, 2)), M), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def _random_sym(rng, n):
    a = (rng.random((n, n)) < 0.4) * rng.random((n, n))
    a = np.triu(a, 1)
    return a + a.T


def test_spmm_examples():
    M = np.array([[2.0], [4.0]])
    assert np.array_equal(spmm(SparseAdjacency.from_dense(np.eye(2)), M), M)
    half = SparseAdjacency.from_dense(np.full((2, 2), 0.5))
    assert np.array_equal(spmm(half, M), [[3.0], [3.0]])
    with pytest.raises(DimensionError):
        spmm(half, np.ones((3, 1)))


def test_spmm_matches_dense_matmul():
    rng = np.random.default_rng(0)
    for _ in range(50):
        a = _random_sym(rng, 8)
        m = rng.normal(size=(8, 5))
        out = spmm(SparseAdjacency.from_dense(a), m)
        assert np.max(np.abs(out - a @ m)) <= 1e-12


def test_sparse_adjacency_rejects_asymmetric():
    with pytest.raises(ValidationError):
        SparseAdjacency.from_dense([[0, 1], [0, 0]])


def test_row_softmax_examples():
    assert np.allclose(row_softmax([[0.0, 0.0]]), [[0.5, 0.5]], atol=0, rtol=0)
    out = row_softmax([[1000.0, 1000.0]])
    assert np.all(np.isfinite(out)) and np.array_equal(out, [[0.5, 0.5]])
    # 1 / (1 + e^0.6)
    expected = 1.0 / (1.0 + math.exp(0.6))
    out = row_softmax([[0.2, 0.8]])
    assert out[0, 0] == pytest.approx(expected, abs=1e-15)
    assert out[0, 0] == pytest.approx(0.35434369, abs=1e-8)
    assert out[0, 1] == pytest.approx(0.64565631, abs=1e-8)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_row_softmax_properties(m, shift):
    p = row_softmax(m)
    assert np.max(np.abs(p.sum(axis=1) - 1)) <= 1e-12
    assert np.allclose(row_softmax(m + shift), p, atol=1e-12, rtol=0)


def test_cross_entropy_examples():
    oh = np.eye(3)
    assert cross_entropy(oh, oh, [0, 1, 2]) <= 1e-11
    uniform = np.full((4, 5), 0.2)
    target = np.random.default_rng(1).dirichlet(np.ones(5), size=4)
    assert cross_entropy(uniform, target, np.ones(4, bool)) == pytest.approx(math.log(5), abs=1e-12)
    assert cross_entropy([[0.25, 0.75]], [[0.0, 1.0]], [0]) == pytest.approx(0.28768207, abs=1e-8)
    with pytest.raises(ValidationError):
        cross_entropy(oh, oh, np.zeros(3, bool))


def _instance(seed=0, n=6, d=4, h=3, c=2, directions=3):
    rng = np.random.default_rng(seed)
    a = _random_sym(rng, n)
    a = (a > 0).astype(float)
    np.fill_diagonal(a, 0)
    at = a + np.eye(n)
    deg = at.sum(axis=1)
    adj = SparseAdjacency.from_dense(at / np.sqrt(np.outer(deg, deg)))
    X = rng.normal(size=(n, d))
    ax = spmm(adj, X)
    W0 = rng.normal(size=(d, h))
    W1 = rng.normal(size=(h, c))
    Y = row_softmax(rng.normal(size=(n, c)))
    T0 = rng.normal(size=(directions, d, h))
    T1 = rng.normal(size=(directions, h, c))
    TY = rng.normal(size=(directions, n, c))
    TY -= TY.mean(axis=2, keepdims=True)  # keep target rows stochastic along the path
    mask = np.array([True, False, True, True, False, True])[:n]
    return ax, adj, W0, W1, Y, T0, T1, TY, mask


def _loss(ax, adj, W0, W1, Y, mask):
    return grad_and_tangents(ax, adj, Dual.constant(W0, 0), Dual.constant(W1, 0),
                             Dual.constant(Y, 0), mask).loss


def test_gradients_match_finite_differences():
    ax, adj, W0, W1, Y, *_, mask = _instance()
    res = grad_and_tangents(ax, adj, Dual.constant(W0, 0), Dual.constant(W1, 0),
                            Dual.constant(Y, 0), mask)
    fd0 = central_diff(lambda: _loss(ax, adj, W0, W1, Y, mask), W0)
    fd1 = central_diff(lambda: _loss(ax, adj, W0, W1, Y, mask), W1)
    assert rel_err(res.grads[0], fd0) < 1e-6
    assert rel_err(res.grads[1], fd1) < 1e-6


def test_grad_tangents_match_finite_differences():
    ax, adj, W0, W1, Y, T0, T1, TY, mask = _instance(directions=3)
    res = grad_and_tangents(ax, adj, Dual(W0, T0), Dual(W1, T1), Dual(Y, TY), mask)
    h = 1e-5
    for d in range(3):
        def grads(s):
            return grad_and_tangents(ax, adj, Dual.constant(W0 + s * T0[d], 0),
                                     Dual.constant(W1 + s * T1[d], 0),
                                     Dual.constant(Y + s * TY[d], 0), mask).grads
        plus, minus = grads(h), grads(-h)
        for i in range(2):
            fd = (plus[i] - minus[i]) / (2 * h)
            assert rel_err(res.grad_tangents[i][d], fd) < 1e-5


def test_zero_tangents_give_zero_grad_tangents():
    ax, adj, W0, W1, Y, *_, mask = _instance()
    res = grad_and_tangents(ax, adj, Dual.constant(W0, 4), Dual.constant(W1, 4),
                            Dual.constant(Y, 4), mask)
    assert not np.any(res.grad_tangents[0]) and not np.any(res.grad_tangents[1])


def test_tangent_linearity():
    ax, adj, W0, W1, Y, T0, T1, TY, mask = _instance(directions=2)
    base = grad_and_tangents(ax, adj, Dual(W0, T0), Dual(W1, T1), Dual(Y, TY), mask)
    alpha = 2.5
    scaled = grad_and_tangents(ax, adj, Dual(W0, alpha * T0), Dual(W1, alpha * T1),
                               Dual(Y, alpha * TY), mask)
    for a, b in zip(scaled.grad_tangents, base.grad_tangents):
        assert np.max(np.abs(a - alpha * b)) <= 1e-12 * max(1.0, np.abs(b).max())


def test_deterministic():
    ax, adj, W0, W1, Y, T0, T1, TY, mask = _instance()
    r1 = grad_and_tangents(ax, adj, Dual(W0, T0), Dual(W1, T1), Dual(Y, TY), mask)
    r2 = grad_and_tangents(ax, adj, Dual(W0, T0), Dual(W1, T1), Dual(Y, TY), mask)
    assert r1.loss == r2.loss
    for a, b in zip(r1.grads + r1.grad_tangents, r2.grads + r2.grad_tangents):
        assert np.array_equal(a, b)


def test_non_finite_is_reported_with_stage():
    ax, adj, W0, W1, Y, *_, mask = _instance()
    W1 = W1.copy()
    W1[0, 0] = np.inf
    with pytest.raises(NumericError, match="student forward"):
        grad_and_tangents(ax, adj, Dual.constant(W0, 0), Dual.constant(W1, 0),
                          Dual.constant(Y, 0), mask)


def test_dual_shape_checked():
    with pytest.raises(DimensionError):
        Dual(np.zeros((2, 2)), np.zeros((1, 2, 3)))
