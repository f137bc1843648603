import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dplrprop import dplr
from dplrprop.decompose import (
    DecomposeConfig,
    dense_operator,
    fast_dplr,
    gram_schmidt_unnormalized,
    lambda_step,
    lowrank_operator,
    lowrank_weight,
)
from dplrprop.dplr import DplrMatrix
from dplrprop.errors import NumericError

from conftest import random_dplr, rel_fro


def rho(M, lam, V):
    """Frobenius residual of a DPLR fit to a dense M."""
    return np.linalg.norm(M - np.diag(lam) - V @ V.T)


def residual(W, cov, cfg):
    out = fast_dplr(dense_operator(W), cov, cfg)
    M = W @ dplr.to_dense(cov) @ W.T
    return rel_fro(dplr.to_dense(out), M), out


# ---------------------------------------------------------------- dense oracle


@pytest.mark.parametrize("seed", range(5))
def test_operator_adjoint_and_diag(seed):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((7, 5))
    for op in (dense_operator(W), lowrank_operator(lowrank_weight(W, 5))):
        u, v = rng.standard_normal(5), rng.standard_normal(7)
        np.testing.assert_allclose(op.apply(u) @ v, u @ op.apply_transpose(v), rtol=1e-10)
    lam, U = rng.random(5), rng.standard_normal((5, 2))
    expect = np.diag(W @ (np.diag(lam) + U @ U.T) @ W.T)
    np.testing.assert_allclose(dense_operator(W).diag_of_congruence(lam, U), expect, rtol=1e-10)


@pytest.mark.parametrize("ritz", [True, False])
def test_full_rank_matches_dense_congruence(ritz):
    rng = np.random.default_rng(3)
    W = rng.standard_normal((8, 6))
    cov = random_dplr(rng, 6, 2)
    err, out = residual(W, cov, DecomposeConfig(rank=8, iterations=6, ritz=ritz))
    assert np.all(out.lam >= 0)
    if ritz:
        assert err <= 1e-8
    else:
        assert err <= 0.5


# ---------------------------------------------------------------- examples


def test_zero_operator():
    W = np.zeros((4, 3))
    out = fast_dplr(dense_operator(W), random_dplr(np.random.default_rng(0), 3, 1), DecomposeConfig(2))
    np.testing.assert_array_equal(out.lam, 0)
    assert out.rank == 0


def test_identity_rank_one_example():
    W = np.eye(4)
    err, _ = residual(W, DplrMatrix.diag(np.ones(4)), DecomposeConfig(rank=1, iterations=3))
    assert err <= 1e-6


def test_diag_plus_rank_one_example():
    cov = DplrMatrix(np.array([1.0, 2.0]), np.array([[1.0], [1.0]]))
    err, _ = residual(np.eye(2), cov, DecomposeConfig(rank=1, iterations=4))
    assert err <= 1e-8


def test_gram_schmidt_examples():
    rng = np.random.default_rng(0)
    Q, _ = np.linalg.qr(rng.standard_normal((6, 3)))
    V = Q * np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(gram_schmidt_unnormalized(V), V, atol=1e-12)

    v = rng.standard_normal(5)
    out = gram_schmidt_unnormalized(np.stack([v, v], axis=1))
    assert out.shape == (5, 1)
    np.testing.assert_allclose(out[:, 0], v)

    V = rng.standard_normal((6, 3))
    out = gram_schmidt_unnormalized(V)
    gram = out.T @ out
    np.testing.assert_allclose(gram - np.diag(np.diag(gram)), 0, atol=1e-10)
    # first column untouched, later ones lose only their projections
    np.testing.assert_array_equal(out[:, 0], V[:, 0])
    proj = V[:, 1] - (out[:, 0] @ V[:, 1]) / (out[:, 0] @ out[:, 0]) * out[:, 0]
    np.testing.assert_allclose(out[:, 1], proj, atol=1e-12)


def test_lambda_step_examples():
    np.testing.assert_array_equal(lambda_step(np.array([1.0, -2.0]), np.zeros((2, 1)), np.ones(1)), [1, 0])
    np.testing.assert_array_equal(lambda_step(np.array([1.0, 1.0]), np.array([[1.0], [0.0]]), np.ones(1)), [0, 1])


@pytest.mark.parametrize("seed", range(10))
def test_lambda_step_is_coordinatewise_optimal(seed):
    rng = np.random.default_rng(seed)
    m = 6
    A = rng.standard_normal((m, m))
    M = A @ A.T
    V = rng.standard_normal((m, 2))
    s_inv = 1.0 / np.linalg.norm(V, axis=0)
    lam = lambda_step(np.diag(M), V, s_inv)
    Vs = V * np.sqrt(s_inv)
    base = rho(M, lam, Vs)
    for i in range(m):
        for delta in (1e-3, -1e-3):
            trial = lam.copy()
            trial[i] = max(trial[i] + delta, 0.0)
            assert rho(M, trial, Vs) >= base - 1e-12


def test_lowrank_weight_examples():
    rng = np.random.default_rng(0)
    W = np.outer(rng.standard_normal(5), rng.standard_normal(4))
    np.testing.assert_allclose(lowrank_weight(W, 1).dense(), W, atol=1e-10)
    W = rng.standard_normal((5, 4))
    np.testing.assert_allclose(lowrank_weight(W, 4).dense(), W, atol=1e-10)
    W = rng.standard_normal((20, 10))
    s = np.linalg.svd(W, compute_uv=False)
    err = np.linalg.norm(W - lowrank_weight(W, 3).dense())
    np.testing.assert_allclose(err, np.sqrt(np.sum(s[3:] ** 2)), atol=1e-8)
    with pytest.raises(ValueError):
        lowrank_weight(W, 11)
    with pytest.raises(ValueError):
        lowrank_weight(W, 0)


def test_errors():
    W = np.eye(3)
    with pytest.raises(ValueError):
        fast_dplr(dense_operator(W), DplrMatrix.diag(np.ones(3)), DecomposeConfig(rank=4))
    with pytest.raises(NumericError), np.errstate(invalid="ignore"):
        fast_dplr(dense_operator(W * np.inf), DplrMatrix.diag(np.ones(3)), DecomposeConfig(rank=1))
    with pytest.raises(ValueError):
        DecomposeConfig(rank=0)


# ---------------------------------------------------------------- invariants


@settings(max_examples=30, deadline=None)
@given(m=st.integers(2, 20), n=st.integers(2, 20), r=st.integers(1, 4), seed=st.integers(0, 2**31),
       ritz=st.booleans())
def test_output_is_valid_and_deterministic(m, n, r, seed, ritz):
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((m, n))
    cov = random_dplr(rng, n, 2)
    cfg = DecomposeConfig(rank=min(r, m), seed=seed % 1000, ritz=ritz)
    a = fast_dplr(dense_operator(W), cov, cfg)
    b = fast_dplr(dense_operator(W), cov, cfg)
    assert np.all(a.lam >= 0) and a.rank <= cfg.rank
    assert np.all(np.isfinite(a.factor))
    np.testing.assert_array_equal(a.lam, b.lam)
    np.testing.assert_array_equal(a.factor, b.factor)


@pytest.mark.parametrize("ritz", [True, False])
def test_beats_diagonal_baseline(ritz):
    wins = 0
    for seed in range(40):
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((16, 12))
        cov = random_dplr(rng, 12, 3)
        M = W @ dplr.to_dense(cov) @ W.T
        out = fast_dplr(dense_operator(W), cov, DecomposeConfig(rank=2, seed=seed, ritz=ritz))
        wins += rho(M, out.lam, out.factor) <= rho(M, np.maximum(np.diag(M), 0), np.zeros((16, 0)))
    assert wins >= 36


def test_warm_start_shape_checked():
    W = np.eye(3)
    with pytest.raises(ValueError):
        fast_dplr(dense_operator(W), DplrMatrix.diag(np.ones(3)), DecomposeConfig(rank=1), warm_start=np.ones((2, 1)))
    out = fast_dplr(dense_operator(W), DplrMatrix.diag(np.ones(3)), DecomposeConfig(rank=1),
                    warm_start=np.ones((3, 1)))
    assert np.all(out.lam >= 0)
