"""Diagonal-plus-low-rank covariance matrices and Gaussian states.

A :class:`DplrMatrix` stands for ``diag(lam) + U @ U.T`` with ``lam >= 0``,
which is positive semidefinite by construction. Every operation here works
in ``O(n r)`` (or ``O(n r^2 + r^3)`` for the Woodbury solve) and never forms
the dense ``n x n`` matrix, except :func:`to_dense`, which exists for tests.

All arrays may carry leading batch axes: ``lam`` has shape ``(..., n)`` and
``factor`` shape ``(..., n, r)``. A single covariance simply has no leading
axes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from dplrprop._linalg import rank_major
from dplrprop.errors import ShapeError, SingularCovarianceError

DENSE_CAP = 4096
SOLVE_TOL = 1e-12


def _trusted(cls, **values):
    """Build a frozen instance from already validated read-only arrays."""
    obj = object.__new__(cls)
    for k, v in values.items():
        object.__setattr__(obj, k, v)
    return obj


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DplrMatrix:
    """Covariance ``diag(lam) + factor @ factor.T``.

    ``factor`` may have zero columns, which encodes a purely diagonal (or
    zero) covariance.
    """

    lam: np.ndarray
    factor: np.ndarray

    def __post_init__(self):
        lam = _frozen(self.lam)
        factor = np.asarray(self.factor, dtype=np.float64)
        if factor.ndim == lam.ndim:
            # a bare (n,) lam with an empty factor given as e.g. []
            if factor.size == 0:
                factor = np.zeros(lam.shape + (0,))
            else:
                raise ShapeError(f"factor must have shape {lam.shape} + (r,), got {factor.shape}")
        if factor.shape[:-1] != lam.shape:
            raise ShapeError(f"factor rows {factor.shape[:-1]} do not match lam {lam.shape}")
        if np.any(lam < 0) or not np.all(np.isfinite(lam)):
            raise ValueError("lam must be finite and nonnegative")
        object.__setattr__(self, "lam", lam)
        factor = rank_major(factor, copy=True)
        factor.flags.writeable = False
        object.__setattr__(self, "factor", factor)

    @classmethod
    def zeros(cls, n, batch_shape=()):
        return cls(np.zeros(tuple(batch_shape) + (n,)), np.zeros(tuple(batch_shape) + (n, 0)))

    @classmethod
    def diag(cls, lam):
        lam = np.asarray(lam, dtype=np.float64)
        return cls(lam, np.zeros(lam.shape + (0,)))

    @property
    def dim(self) -> int:
        return self.lam.shape[-1]

    @property
    def rank(self) -> int:
        return self.factor.shape[-1]

    @property
    def batch_shape(self) -> Tuple[int, ...]:
        return self.lam.shape[:-1]

    def __getitem__(self, idx):
        """Select batch items, e.g. ``cov[3]``."""
        if not self.batch_shape:
            raise IndexError("indexing selects batch items; this matrix has no batch axes")
        lam, factor = self.lam[idx], self.factor[idx]
        if lam.ndim == 0 or factor.shape[:-1] != lam.shape:
            raise IndexError(f"index {idx!r} does not select batch items")
        return _trusted(DplrMatrix, lam=lam, factor=factor)

    def is_zero(self) -> bool:
        return not self.lam.any() and not self.factor.any()

    def compact(self) -> "DplrMatrix":
        """Drop factor columns that are exactly zero in every batch item."""
        keep = np.any(self.factor != 0, axis=tuple(range(self.factor.ndim - 1)))
        if keep.all():
            return self
        return _trusted(DplrMatrix, lam=self.lam, factor=self.factor[..., keep])


@dataclass(frozen=True, eq=False)
class GaussianState:
    """Mean and DPLR covariance of a layer's activations.

    ``shape`` optionally records the ``(C, H, W)`` layout of the flat mean
    for convolution stages.
    """

    mean: np.ndarray
    cov: DplrMatrix
    shape: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        mean = _frozen(self.mean)
        object.__setattr__(self, "mean", mean)
        if mean.shape != self.cov.lam.shape:
            raise ShapeError(f"mean shape {mean.shape} does not match covariance {self.cov.lam.shape}")
        if self.shape is not None:
            shape = tuple(int(s) for s in self.shape)
            if int(np.prod(shape)) != mean.shape[-1]:
                raise ShapeError(f"shape {shape} does not multiply out to {mean.shape[-1]}")
            object.__setattr__(self, "shape", shape)

    @classmethod
    def deterministic(cls, x, shape=None):
        x = np.asarray(x, dtype=np.float64)
        if shape is None and x.ndim == 3:
            shape = x.shape
            x = x.reshape(-1)
        return cls(x, DplrMatrix.zeros(x.shape[-1], x.shape[:-1]), shape)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def __getitem__(self, idx):
        cov = self.cov[idx]
        return _trusted(GaussianState, mean=self.mean[idx], cov=cov, shape=self.shape)

    def variance(self):
        return diagonal(self.cov)


def _check_vec(sigma, v):
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != sigma.dim:
        raise ShapeError(f"vector length {v.shape[-1]} != covariance dim {sigma.dim}")
    return v


def _project(factor, v):
    """``U^T v`` for ``v`` of shape (..., n); result (..., r)."""
    return (factor * v[..., :, None]).sum(axis=-2)


def matvec(sigma: DplrMatrix, v) -> np.ndarray:
    """Return ``(diag(lam) + U U^T) v``."""
    v = _check_vec(sigma, v)
    out = sigma.lam * v
    if sigma.rank:
        out = out + (sigma.factor * _project(sigma.factor, v)[..., None, :]).sum(axis=-1)
    return out


def diagonal(sigma: DplrMatrix) -> np.ndarray:
    """Diagonal of the represented matrix: ``lam + rowsum(U * U)``."""
    if not sigma.rank:
        return np.array(sigma.lam)
    return sigma.lam + np.square(sigma.factor).sum(axis=-1)


def add_diagonal(sigma: DplrMatrix, d) -> DplrMatrix:
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("add_diagonal needs a nonnegative vector")
    return DplrMatrix(sigma.lam + d, sigma.factor)


def scale_rows(sigma: DplrMatrix, d) -> DplrMatrix:
    """Exact congruence ``D Sigma D`` with ``D = diag(d)``."""
    d = _check_vec(sigma, d)
    return DplrMatrix(np.square(d) * sigma.lam, d[..., :, None] * sigma.factor)


def quad_form(sigma: DplrMatrix, f) -> np.ndarray:
    """``f^T Sigma f``, always nonnegative."""
    f = _check_vec(sigma, f)
    out = (sigma.lam * np.square(f)).sum(axis=-1)
    if sigma.rank:
        out = out + np.square(_project(sigma.factor, f)).sum(axis=-1)
    return out


def sample(state: GaussianState, rng: np.random.Generator, size=None) -> np.ndarray:
    """Draw from ``N(mean, lam + U U^T)`` as ``mean + sqrt(lam) x + U y``.

    With ``size`` given, returns an array of shape ``(size, ...)``.
    """
    cov = state.cov
    lead = () if size is None else (int(size),)
    x = rng.standard_normal(lead + cov.lam.shape)
    y = rng.standard_normal(lead + cov.batch_shape + (cov.rank,))
    z = state.mean + np.sqrt(cov.lam) * x
    if cov.rank:
        z = z + (cov.factor * y[..., None, :]).sum(axis=-1)
    return z


def _check_invertible(sigma, tol):
    bad = sigma.lam <= tol
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise SingularCovarianceError(idx if len(idx) > 1 else idx[0], float(sigma.lam[idx]), tol)


def _capacitance(sigma):
    """Cholesky factor of ``I + U^T diag(lam)^-1 U``, shape (..., r, r)."""
    scaled = sigma.factor / sigma.lam[..., :, None]
    cap = np.swapaxes(sigma.factor, -1, -2) @ scaled
    cap = cap + np.eye(sigma.rank)
    return np.linalg.cholesky(cap), scaled


def solve(sigma: DplrMatrix, v, tol: float = SOLVE_TOL) -> np.ndarray:
    """Solve ``(diag(lam) + U U^T) x = v`` with the Woodbury identity.

    Raises
    ------
    SingularCovarianceError
        If some ``lam_i <= tol``.
    """
    v = _check_vec(sigma, v)
    _check_invertible(sigma, tol)
    x = v / sigma.lam
    if not sigma.rank:
        return x
    chol, scaled = _capacitance(sigma)
    rhs = _project(sigma.factor, x)[..., :, None]
    w = np.linalg.solve(np.swapaxes(chol, -1, -2), np.linalg.solve(chol, rhs))[..., 0]
    return x - (scaled * w[..., None, :]).sum(axis=-1)


def logdet(sigma: DplrMatrix, tol: float = SOLVE_TOL) -> np.ndarray:
    """``log det Sigma`` via the matrix determinant lemma."""
    _check_invertible(sigma, tol)
    out = np.log(sigma.lam).sum(axis=-1)
    if sigma.rank:
        chol, _ = _capacitance(sigma)
        out = out + 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    return out


def to_dense(sigma: DplrMatrix, cap: int = DENSE_CAP) -> np.ndarray:
    """Materialize ``diag(lam) + U U^T``. Test oracle bridge only."""
    if sigma.dim > cap:
        raise ValueError(f"refusing to materialize a {sigma.dim}x{sigma.dim} matrix (cap {cap})")
    eye = np.eye(sigma.dim)
    return sigma.lam[..., :, None] * eye + sigma.factor @ np.swapaxes(sigma.factor, -1, -2)
