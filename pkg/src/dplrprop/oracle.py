"""Reference implementations the fast path is checked against.

* Monte-Carlo forward passes that sample every dropout mask and weight.
* Dense full-covariance moment propagation (``O(n^3)``), including the
  general linear-layer rule with arbitrary weight covariance blocks.
* Sample-based Jensen-Shannon divergence.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dplrprop._linalg import rows_times
from dplrprop.config import TAG_MC, stream
from dplrprop.conv import conv2d, conv2d_per_item, conv_output_hw
from dplrprop.moments import (
    Activation,
    Conv2dDet,
    Conv2dMeanField,
    Dropout,
    Flatten,
    LinearDet,
    LinearMeanField,
    LinearRowCov,
    activation_derivative,
    activation_fn,
    activation_moments,
)

DENSE_CAP = 4096
MC_CHUNK = 4096
_CHUNK_BUDGET = 1 << 23  # sampled weight entries held at once


@dataclass(frozen=True)
class McConfig:
    samples: int
    seed: int = 0

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be >= 1")


@dataclass(frozen=True)
class EmpiricalMoments:
    mean: np.ndarray
    cov: np.ndarray
    sample_count: int


# ----------------------------------------------------------------------------
# Monte Carlo


def _chunk_size(model):
    biggest = 1
    for layer in model.layers:
        if isinstance(layer, (LinearMeanField, LinearRowCov)):
            biggest = max(biggest, layer.W_mean.size)
        elif isinstance(layer, Conv2dMeanField):
            biggest = max(biggest, layer.kernel_mean.size)
    return int(max(1, min(MC_CHUNK, _CHUNK_BUDGET // biggest)))


def _draw(rngs, count, shape, kind):
    """Stack ``count`` draws of ``shape`` from every stream in ``rngs``, in order."""
    if kind == "uniform":
        parts = [rng.random((count,) + tuple(shape)) for rng in rngs]
    else:
        parts = [rng.standard_normal((count,) + tuple(shape)) for rng in rngs]
    return parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)


def _sample_pass(model, xs, count, rngs):
    """``count`` passes for each row of ``xs``; row ``g`` draws only from ``rngs[g]``."""
    xs = np.asarray(xs, dtype=np.float64).reshape(len(rngs), -1)
    n = len(rngs) * count
    h = np.repeat(xs, count, axis=0)
    if model.input_noise is not None:
        h += np.sqrt(model.input_noise) * _draw(rngs, count, h.shape[1:], "normal")
    shape = model.input_shape
    for layer in model.layers:
        if isinstance(layer, Dropout):
            q = 1.0 - layer.p
            keep = _draw(rngs, count, h.shape[1:], "uniform") < q
            h = np.where(keep, h / q, 0.0)
        elif isinstance(layer, LinearMeanField):
            w = layer.W_mean + np.sqrt(layer.W_var) * _draw(rngs, count, layer.W_mean.shape, "normal")
            b = layer.b_mean + np.sqrt(layer.b_var) * _draw(rngs, count, layer.b_mean.shape, "normal")
            h = (w @ h[:, :, None])[:, :, 0] + b
        elif isinstance(layer, LinearRowCov):
            m, _, s = layer.row_factors.shape
            g = _draw(rngs, count, (m, s), "normal")
            w = layer.W_mean + np.einsum("mns,bms->bmn", layer.row_factors, g)
            h = (w @ h[:, :, None])[:, :, 0] + layer.b_mean
        elif isinstance(layer, LinearDet):
            h = rows_times(h, layer.W_mean.T) + layer.b_mean
        elif isinstance(layer, Conv2dMeanField):
            k = layer.kernel_mean + np.sqrt(layer.kernel_var) * _draw(rngs, count, layer.kernel_mean.shape, "normal")
            b = layer.bias_mean + np.sqrt(layer.bias_var) * _draw(rngs, count, layer.bias_mean.shape, "normal")
            y = conv2d_per_item(h.reshape((n,) + shape), k, layer.stride, layer.padding)
            h = (y + b[:, :, None, None]).reshape(n, -1)
        elif isinstance(layer, Conv2dDet):
            y = conv2d(h.reshape((n,) + shape), layer.kernel_mean, layer.stride, layer.padding)
            h = (y + layer.bias_mean[:, None, None]).reshape(n, -1)
        elif isinstance(layer, Activation):
            h = activation_fn(layer.kind, h)
        shape = tuple(layer.output_shape(shape))
    return h


def mc_forward(model, x, cfg: McConfig, input_index: int = 0) -> np.ndarray:
    """``cfg.samples`` independent stochastic forward passes, shape (N, out_dim).

    Dropout masks are 0 with probability p and 1/q otherwise; mean-field
    weights are drawn independently per entry, row-covariance rows as
    ``mean + F_i g``. Passes are generated in fixed-size chunks, chunk ``c``
    drawing from the stream ``(seed, TAG_MC, input_index, c)``.
    """
    return mc_forward_batch(model, np.asarray(x)[None], cfg, first_index=input_index)[0]


def mc_forward_batch(model, xs, cfg: McConfig, first_index: int = 0) -> np.ndarray:
    """:func:`mc_forward` for every input at once, shape (B, N, out_dim).

    Item ``i`` uses input index ``first_index + i`` and gets exactly the
    passes :func:`mc_forward` would give it; small sample counts are
    stacked across inputs into one pass for speed.
    """
    xs = np.asarray(xs, dtype=np.float64)
    xs = xs.reshape(xs.shape[0], -1)
    chunk = _chunk_size(model)
    group = max(1, chunk // min(chunk, cfg.samples))
    per_item = [[] for _ in range(len(xs))]
    for c, start in enumerate(range(0, cfg.samples, chunk)):
        count = min(chunk, cfg.samples - start)
        for g0 in range(0, len(xs), group):
            idx = range(g0, min(g0 + group, len(xs)))
            rngs = [stream(cfg.seed, TAG_MC, first_index + i, c) for i in idx]
            out = _sample_pass(model, xs[g0:g0 + len(rngs)], count, rngs)
            for j, i in enumerate(idx):
                per_item[i].append(out[j * count:(j + 1) * count])
    return np.stack([np.concatenate(p, axis=0) for p in per_item])


def empirical_moments(samples) -> EmpiricalMoments:
    """Unbiased mean and covariance (divisor N - 1)."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] < 2:
        raise ValueError("need at least two sample vectors")
    mean = samples.mean(axis=0)
    centred = samples - mean
    cov = centred.T @ centred / (samples.shape[0] - 1)
    return EmpiricalMoments(mean, 0.5 * (cov + cov.T), samples.shape[0])


# ----------------------------------------------------------------------------
# dense propagation


def conv_matrix(kernel, in_shape, stride=1, padding=0):
    """Explicit matrix of a zero-padded strided convolution, built entry by entry."""
    o, c, kh, kw = kernel.shape
    _, h, w = in_shape
    ho, wo = conv_output_hw(h, w, kh, kw, stride, padding)
    mat = np.zeros((o * ho * wo, c * h * w))
    for oc in range(o):
        for y in range(ho):
            for x in range(wo):
                row = (oc * ho + y) * wo + x
                for ic in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            yy, xx = y * stride + i - padding, x * stride + j - padding
                            if 0 <= yy < h and 0 <= xx < w:
                                mat[row, (ic * h + yy) * w + xx] += kernel[oc, ic, i, j]
    return mat, (o, ho, wo)


def linear_general(mu, sigma, w_mean, b_mean, w_blocks, b_cov=None):
    """Moments of ``W x + b`` for random ``W`` with row-block covariances.

    ``w_blocks`` maps ``(i, j)`` to the n x n covariance between rows i and
    j of ``W``; missing pairs are zero. Entry ``(i, j)`` of the result is
    ``(W S W^T + S_b)_ij + SUM(S_w,ij * (S + mu mu^T))``.
    """
    second = sigma + np.outer(mu, mu)
    out = w_mean @ sigma @ w_mean.T
    for (i, j), block in w_blocks.items():
        out[i, j] += np.sum(block * second)
    if b_cov is not None:
        out = out + b_cov
    return w_mean @ mu + b_mean, out


def _check_cap(n):
    if n > DENSE_CAP:
        raise ValueError(f"dense oracle refuses dimension {n} > {DENSE_CAP}")


def dense_propagate(model, x, act_mode="gauss"):
    """Exact-covariance propagation. Returns ``(mean, dense covariance)``."""
    mu = np.asarray(x, dtype=np.float64).reshape(-1)
    _check_cap(mu.size)
    sigma = np.zeros((mu.size, mu.size))
    if model.input_noise is not None:
        sigma = np.diag(model.input_noise)
    shape = model.input_shape
    for layer in model.layers:
        if isinstance(layer, Dropout):
            ratio = layer.p / (1.0 - layer.p)
            sigma = sigma + np.diag((mu ** 2 + np.diag(sigma)) * ratio)
        elif isinstance(layer, (LinearDet, LinearMeanField, LinearRowCov)):
            _check_cap(layer.W_mean.shape[0])
            blocks, b_cov = {}, None
            if isinstance(layer, LinearMeanField):
                blocks = {(i, i): np.diag(layer.W_var[i]) for i in range(layer.W_var.shape[0])}
                b_cov = np.diag(layer.b_var)
            elif isinstance(layer, LinearRowCov):
                blocks = {(i, i): f @ f.T for i, f in enumerate(layer.row_factors)}
            mu, sigma = linear_general(mu, sigma, layer.W_mean, layer.b_mean, blocks, b_cov)
        elif isinstance(layer, (Conv2dDet, Conv2dMeanField)):
            mat, out_shape = conv_matrix(layer.kernel_mean, shape, layer.stride, layer.padding)
            _check_cap(mat.shape[0])
            bias = np.repeat(layer.bias_mean, out_shape[1] * out_shape[2])
            blocks, b_cov = {}, None
            if isinstance(layer, Conv2dMeanField):
                var_mat, _ = conv_matrix(layer.kernel_var, shape, layer.stride, layer.padding)
                blocks = {(i, i): np.diag(var_mat[i]) for i in range(var_mat.shape[0])}
                b_cov = np.diag(np.repeat(layer.bias_var, out_shape[1] * out_shape[2]))
            mu, sigma = linear_general(mu, sigma, mat, bias, blocks, b_cov)
        elif isinstance(layer, Activation):
            mode = layer.cov_mode or act_mode
            var = np.diag(sigma).copy()
            new_mu, new_var = activation_moments(layer.kind, mu, var)
            if mode == "taylor":
                d = activation_derivative(layer.kind, mu)
            else:
                sd = np.sqrt(var)
                d = np.where(sd > 0, np.sqrt(new_var) / np.where(sd > 0, sd, 1.0), 0.0)
            mu, sigma = new_mu, d[:, None] * sigma * d[None, :]
        elif not isinstance(layer, Flatten):
            raise TypeError(f"unsupported layer {type(layer).__name__}")
        shape = tuple(layer.output_shape(shape))
    return mu, sigma


# ----------------------------------------------------------------------------
# JSD from samples


def entropy(p, axis=-1):
    """Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=axis)


def sample_jsd(probs) -> float:
    """Entropy of the mean distribution minus the mean entropy."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 2:
        raise ValueError("need at least two probability vectors")
    if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > 1e-8):
        raise ValueError("every row must be a probability vector")
    return float(max(entropy(probs.mean(axis=0)) - entropy(probs).mean(), 0.0))
