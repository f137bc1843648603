"""Uncertainty scores and calibration metrics.

Logarithms are natural throughout, so entropies and divergences are in nats.
Scores accept batched states (leading axes) and return one value per item.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import rankdata

from dplrprop import dplr
from dplrprop.dplr import GaussianState
from dplrprop.oracle import entropy as _entropy

Z95 = 1.959963984540054
ECE_BINS = 15


def softmax(logits, axis=-1):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def jsd_approx(state: GaussianState, finite_n=None):
    """Sample-free JSD estimate ``0.5 (<p, diag S> - <p, S p>)`` with ``p = softmax(mean)``.

    ``finite_n`` multiplies by ``1 - 1/n`` to match the expected JSD of ``n``
    softmax samples; by default the large-sample limit is returned. Small
    negative values (from an approximate covariance) are clamped to 0.
    """
    p = softmax(state.mean)
    val = 0.5 * ((p * dplr.diagonal(state.cov)).sum(axis=-1) - dplr.quad_form(state.cov, p))
    if finite_n is not None:
        if finite_n < 1:
            raise ValueError("finite_n must be >= 1")
        val = val * (1.0 - 1.0 / finite_n)
    return np.maximum(val, 0.0)


def entropy(state: GaussianState):
    return _entropy(softmax(state.mean))


def maxprob(state: GaussianState):
    return softmax(state.mean).max(axis=-1)


@dataclass(frozen=True, eq=False)
class ReferenceGaussian:
    """Class means plus one shared covariance, fitted on in-distribution logit means."""

    class_means: np.ndarray
    shared_cov: np.ndarray
    jitter: float
    _chol: tuple

    def score(self, x):
        return mahalanobis_score(self, x)


def mahalanobis_fit(means, labels=None) -> ReferenceGaussian:
    """Per-class means and a pooled covariance (one global Gaussian without labels)."""
    means = np.asarray(means, dtype=np.float64)
    n, d = means.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} reference points for dimension {d}, got {n}")
    labels = np.zeros(n, dtype=int) if labels is None else np.asarray(labels)
    classes = np.unique(labels)
    centres = np.stack([means[labels == c].mean(axis=0) for c in classes])
    resid = means - centres[np.searchsorted(classes, labels)]
    cov = resid.T @ resid / max(n - len(classes), 1)
    cov = 0.5 * (cov + cov.T)
    scale = max(float(np.mean(np.diag(cov))), 1e-300)
    jitter = 0.0
    while True:
        try:
            chol = cho_factor(cov + jitter * scale * np.eye(d), lower=True)
            break
        except np.linalg.LinAlgError:
            jitter = 1e-12 if jitter == 0.0 else jitter * 10.0
            if jitter > 1.0:
                raise
    return ReferenceGaussian(centres, cov + jitter * scale * np.eye(d), jitter * scale, chol)


def mahalanobis_score(ref: ReferenceGaussian, state) -> np.ndarray:
    """Smallest Mahalanobis distance from the state mean to any class mean."""
    x = state.mean if isinstance(state, GaussianState) else np.asarray(state, dtype=np.float64)
    diff = x[..., None, :] - ref.class_means
    flat = diff.reshape(-1, diff.shape[-1])
    sol = cho_solve(ref._chol, flat.T).T
    d2 = np.maximum((flat * sol).sum(axis=-1), 0.0).reshape(diff.shape[:-1])
    return np.sqrt(d2.min(axis=-1))


def gaussian_nll(state: GaussianState, target, jitter: float = 0.0):
    """Negative log density of ``target`` under ``N(mean, cov + jitter I)``."""
    cov = state.cov if jitter == 0 else dplr.add_diagonal(state.cov, np.full(state.cov.lam.shape, jitter))
    r = np.asarray(target, dtype=np.float64) - state.mean
    maha = (r * dplr.solve(cov, r)).sum(axis=-1)
    return 0.5 * (maha + dplr.logdet(cov) + state.dim * math.log(2.0 * math.pi))


def gaussian_nll_dense(mean, cov, target, jitter: float = 0.0) -> float:
    """:func:`gaussian_nll` for a dense covariance (Cholesky based)."""
    mean = np.asarray(mean, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64) + jitter * np.eye(mean.size)
    chol = cho_factor(cov, lower=True)
    r = np.asarray(target, dtype=np.float64) - mean
    logdet = 2.0 * np.log(np.diag(chol[0])).sum()
    return float(0.5 * (r @ cho_solve(chol, r) + logdet + mean.size * math.log(2.0 * math.pi)))


def _nonempty(x, what):
    x = np.asarray(x)
    if x.shape[0] == 0:
        raise ValueError(f"{what}: empty evaluation set")
    return x


def ece(probs, labels, bins: int = ECE_BINS) -> float:
    """Expected calibration error over equal-width confidence bins."""
    probs = _nonempty(np.asarray(probs, dtype=np.float64), "ece")
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        if sel.any():
            total += sel.sum() / len(conf) * abs(correct[sel].mean() - conf[sel].mean())
    return float(total)


def brier(probs, labels) -> float:
    """Mean over items of the squared distance to the one-hot label."""
    probs = _nonempty(np.asarray(probs, dtype=np.float64), "brier")
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(probs)), np.asarray(labels)] = 1.0
    return float(np.square(probs - onehot).sum(axis=1).mean())


def accuracy(probs, labels) -> float:
    probs = _nonempty(np.asarray(probs, dtype=np.float64), "accuracy")
    return float((probs.argmax(axis=1) == np.asarray(labels)).mean())


def coverage95(states: GaussianState, targets) -> float:
    """Fraction of targets inside ``mean +/- 1.959964 sd`` (all coordinates pooled)."""
    means = _nonempty(np.atleast_2d(states.mean), "coverage95")
    sd = np.sqrt(np.atleast_2d(states.variance()))
    inside = np.abs(np.asarray(targets, dtype=np.float64) - means) <= Z95 * sd
    return float(inside.mean())


def auroc(scores_in, scores_out) -> float:
    """Area under the ROC curve for telling ``scores_out`` (positives) from ``scores_in``.

    Mann-Whitney form with average ranks for ties.
    """
    a = np.asarray(scores_in, dtype=np.float64)
    b = np.asarray(scores_out, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("auroc needs both score sets non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[len(a):].sum() - len(b) * (len(b) + 1) / 2.0
    return float(u / (len(a) * len(b)))
