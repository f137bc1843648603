"""Fast DPLR approximation of a congruence ``M = W (diag(lam) + U U^T) W^T``.

``M`` is never formed. The decomposition interleaves a diagonal update
``lam <- max(diag(M - V V^T), 0)`` with subspace iteration on ``M - lam``,
touching ``W`` only through ``W v`` and ``W^T v`` products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from dplrprop._linalg import rank_major, rows_times
from dplrprop.dplr import DplrMatrix
from dplrprop.errors import NumericError, ShapeError

REL_DROP_TOL = 1e-10


@dataclass(frozen=True)
class CongruenceOperator:
    """Matrix-free linear map ``W`` (``out_dim x in_dim``).

    ``apply`` and ``apply_transpose`` act on the last axis of their argument
    (row vectors, any leading axes). ``diag_of_scaled(lam)`` must return
    ``diag(W diag(lam) W^T)``.
    """

    apply: Callable[[np.ndarray], np.ndarray]
    apply_transpose: Callable[[np.ndarray], np.ndarray]
    diag_of_scaled: Callable[[np.ndarray], np.ndarray]
    in_dim: int
    out_dim: int

    def diag_of_congruence(self, lam, factor):
        """``diag(W diag(lam) W^T) + rowsum((W U) * (W U))``."""
        out = self.diag_of_scaled(lam)
        if factor.shape[-1]:
            y = self.apply(np.swapaxes(factor, -1, -2))
            out = out + np.square(y).sum(axis=-2)
        return out


@dataclass(frozen=True)
class DecomposeConfig:
    rank: int
    iterations: int = 3
    column_drop_tol: float = 1e-12
    seed: int = 0
    ritz: bool = True

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass(frozen=True)
class LowRankWeight:
    """``W ~= left @ right.T`` with ``left`` m x q and ``right`` n x q."""

    left: np.ndarray
    right: np.ndarray

    @property
    def rank(self):
        return self.left.shape[1]

    def dense(self):
        return self.left @ self.right.T


def lowrank_weight(W, q: int) -> LowRankWeight:
    """Best rank-``q`` Frobenius approximation of ``W`` by truncated SVD."""
    W = np.asarray(W, dtype=np.float64)
    m, n = W.shape
    if not 1 <= q <= min(m, n):
        raise ValueError(f"weight rank q={q} outside [1, {min(m, n)}]")
    u, s, vt = np.linalg.svd(W, full_matrices=False)
    return LowRankWeight(np.ascontiguousarray(u[:, :q] * s[:q]), np.ascontiguousarray(vt[:q].T))


def dense_operator(W, w_sq=None) -> CongruenceOperator:
    W = np.ascontiguousarray(W, dtype=np.float64)
    w_sq_t = np.ascontiguousarray((np.square(W) if w_sq is None else w_sq).T)
    wt = np.ascontiguousarray(W.T)
    return CongruenceOperator(
        apply=lambda x: rows_times(x, wt),
        apply_transpose=lambda y: rows_times(y, W),
        diag_of_scaled=lambda lam: rows_times(lam, w_sq_t),
        in_dim=W.shape[1],
        out_dim=W.shape[0],
    )


def lowrank_operator(lrw: LowRankWeight, w_sq=None) -> CongruenceOperator:
    """Operator for ``left @ right.T``.

    ``w_sq`` is the elementwise square used for the diagonal term. Passing the
    square of the original full-rank weight keeps marginal variances exact
    while only the off-diagonal structure goes through the cheap factors.
    """
    a, b = lrw.left, lrw.right
    at, bt = np.ascontiguousarray(a.T), np.ascontiguousarray(b.T)
    if w_sq is None:
        w_sq = np.square(lrw.dense())
    w_sq_t = np.ascontiguousarray(np.asarray(w_sq).T)
    return CongruenceOperator(
        apply=lambda x: rows_times(rows_times(x, b), at),
        apply_transpose=lambda y: rows_times(rows_times(y, a), bt),
        diag_of_scaled=lambda lam: rows_times(lam, w_sq_t),
        in_dim=b.shape[0],
        out_dim=a.shape[0],
    )


def _orthogonalize_rows(R, drop_tol):
    """Two-pass modified Gram-Schmidt over the rows of ``R`` (shape (..., r, m)).

    Returns a copy with orthogonal (unnormalized) rows, dropped rows set to
    zero, and the squared row norms.
    """
    R = np.array(R, dtype=np.float64, order="C")
    r = R.shape[-2]
    norms2 = np.zeros(R.shape[:-2] + (r,))
    for j in range(r):
        v = R[..., j, :]
        orig = np.sqrt(np.square(v).sum(axis=-1))
        for _ in range(2):
            for i in range(j):
                nn = norms2[..., i]
                dot = (R[..., i, :] * v).sum(axis=-1)
                coef = np.divide(dot, nn, out=np.zeros_like(dot), where=nn > 0)
                v = v - coef[..., None] * R[..., i, :]
        nrm = np.sqrt(np.square(v).sum(axis=-1))
        dead = (nrm < drop_tol) | (nrm <= REL_DROP_TOL * orig)
        R[..., j, :] = np.where(dead[..., None], 0.0, v)
        norms2[..., j] = np.where(dead, 0.0, np.square(nrm))
    return R, norms2


def _orthonormal_rows(R, drop_tol):
    """Orthonormal basis for the row space of ``R`` by Gram-matrix whitening.

    Two passes of ``Q = D^-1/2 P^T R`` with ``R R^T = P D P^T``; directions
    with singular value below ``drop_tol`` (or ``REL_DROP_TOL`` times the
    largest) come back as zero rows. Row order is not Gram-Schmidt order;
    callers only use the spanned subspace.
    """
    Q = R
    for _ in range(2):
        g, P = np.linalg.eigh(Q @ np.swapaxes(Q, -1, -2))
        sv = np.sqrt(np.maximum(g, 0.0))
        keep = (sv >= drop_tol) & (sv > REL_DROP_TOL * sv[..., -1:])
        inv = np.divide(1.0, sv, out=np.zeros_like(sv), where=keep)
        Q = (np.swapaxes(P, -1, -2) * inv[..., :, None]) @ Q
    return Q


def _orthogonalize(V, drop_tol):
    """Column form of :func:`_orthogonalize_rows` for ``V`` of shape (..., m, r)."""
    R, norms2 = _orthogonalize_rows(np.swapaxes(V, -1, -2), drop_tol)
    return np.swapaxes(R, -1, -2), norms2


def gram_schmidt_unnormalized(V, drop_tol: float = 1e-12) -> np.ndarray:
    """Orthogonalize columns without normalizing them.

    Column ``j`` becomes the original column minus its projections onto the
    earlier (already orthogonalized) columns. Columns left with norm below
    ``drop_tol`` are removed; with leading batch axes they are zeroed per item
    and only removed when dead in every item.
    """
    out, norms2 = _orthogonalize(V, drop_tol)
    alive = np.any(norms2 > 0, axis=tuple(range(norms2.ndim - 1)))
    return out[..., alive]


def lambda_step(diag_m, V, s_inv) -> np.ndarray:
    """``max(diag_m - rowsum(V**2 * s_inv), 0)``.

    For fixed ``V`` this is the nonnegative diagonal closest to
    ``M - V diag(s_inv) V^T`` in Frobenius norm.
    """
    return np.maximum(diag_m - (np.square(V) * s_inv[..., None, :]).sum(axis=-1), 0.0)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericError("non-finite value during DPLR decomposition")


def decompose_arrays(op: CongruenceOperator, lam_in, factor_in, rank, iterations,
                     drop_tol=1e-12, init=None, ritz=True):
    """Array-level core of :func:`fast_dplr`.

    ``lam_in`` is (..., n), ``factor_in`` (..., n, s) and ``init`` an
    (m, rank) or (..., m, rank) starting block. Returns ``(lam, V)`` with
    ``V`` of fixed width ``rank``; dropped columns are zero.
    """
    lam_in = np.asarray(lam_in, dtype=np.float64)
    factor_in = np.asarray(factor_in, dtype=np.float64)
    if lam_in.shape[-1] != op.in_dim:
        raise ShapeError(f"operator expects dim {op.in_dim}, covariance has {lam_in.shape[-1]}")
    m = op.out_dim
    batch = lam_in.shape[:-1]

    # W U and diag(M) are fixed for the whole call; work on row blocks (..., r, m)
    y_rows = op.apply(np.swapaxes(factor_in, -1, -2)) if factor_in.shape[-1] else None
    diag_m = op.diag_of_scaled(lam_in)
    if y_rows is not None:
        diag_m = diag_m + np.square(y_rows).sum(axis=-2)
        y_t = np.swapaxes(y_rows, -1, -2)

    def apply_m(rows):
        out = op.apply(op.apply_transpose(rows) * lam_in[..., None, :])
        if y_rows is not None:
            out = out + (rows @ y_t) @ y_rows
        return out

    R = np.array(np.swapaxes(np.broadcast_to(np.asarray(init, dtype=np.float64), batch + (m, rank)), -1, -2),
                 order="C")

    if not ritz:
        for _ in range(iterations):
            s_inv = _inv_row_norms(R, drop_tol)
            lam = _lambda_rows(diag_m, R, s_inv)
            R = R * s_inv[..., :, None]
            R = apply_m(R) - lam[..., None, :] * R
            R, _ = _orthogonalize_rows(R, drop_tol)
            _check_finite(R)
        s_inv = _inv_row_norms(R, drop_tol)
        lam = _lambda_rows(diag_m, R, s_inv)
        return lam, np.swapaxes(R * np.sqrt(s_inv)[..., :, None], -1, -2)

    # Ritz form: the column-norm estimate of each eigenvalue is replaced by
    # the exact Rayleigh-Ritz pair of (M - lam) on the current subspace.
    lam = np.zeros(batch + (m,))
    for _ in range(iterations):
        Q = _orthonormal_rows(R, drop_tol)
        Z = apply_m(Q)
        _check_finite(Z)
        Z -= lam[..., None, :] * Q
        B = Q @ np.swapaxes(Z, -1, -2)
        B = 0.5 * (B + np.swapaxes(B, -1, -2))
        w, E = np.linalg.eigh(B)
        Vr = (np.swapaxes(E, -1, -2) @ Q) * np.sqrt(np.maximum(w, 0.0))[..., :, None]
        new_lam = np.maximum(diag_m - np.square(Vr).sum(axis=-2), 0.0)
        # Z holds (M - lam_old) Q; shift to (M - lam_new) Q for the next round
        R = Z + (lam - new_lam)[..., None, :] * Q
        lam = new_lam
    return lam, np.swapaxes(Vr, -1, -2)


def _inv_row_norms(R, drop_tol):
    s = np.sqrt(np.square(R).sum(axis=-1))
    return np.divide(1.0, s, out=np.zeros_like(s), where=s >= drop_tol)


def _lambda_rows(diag_m, R, s_inv):
    return np.maximum(diag_m - (np.square(R) * s_inv[..., :, None]).sum(axis=-2), 0.0)


def fast_dplr(op: CongruenceOperator, input_cov: DplrMatrix, cfg: DecomposeConfig,
              warm_start=None) -> DplrMatrix:
    """DPLR approximation ``(lam*, V*)`` of ``W (lam + U U^T) W^T``.

    Runs ``cfg.iterations`` rounds of the alternating diagonal update and
    subspace iteration. With ``cfg.ritz=False`` the eigenvalue of each
    direction is estimated by the column norms of ``(M - lam) V``; with the
    default ``cfg.ritz=True`` a Rayleigh-Ritz step on the same subspace is
    used instead, which makes full-rank runs exact. Columns that collapse
    below ``cfg.column_drop_tol`` are dropped.
    """
    if input_cov.dim != op.in_dim:
        raise ShapeError(f"operator expects dim {op.in_dim}, covariance has {input_cov.dim}")
    if cfg.rank > op.out_dim:
        raise ValueError(f"rank {cfg.rank} exceeds output dimension {op.out_dim}")
    if warm_start is None:
        init = np.random.default_rng(cfg.seed).standard_normal((op.out_dim, cfg.rank))
    else:
        init = np.asarray(warm_start, dtype=np.float64)
        if init.shape[-2:] != (op.out_dim, cfg.rank):
            raise ShapeError(f"warm start must be {op.out_dim}x{cfg.rank}, got {init.shape}")
    lam, V = decompose_arrays(op, input_cov.lam, input_cov.factor, cfg.rank, cfg.iterations,
                              cfg.column_drop_tol, init, cfg.ritz)
    return DplrMatrix(lam, V).compact()
