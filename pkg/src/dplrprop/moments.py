"""Per-layer mean and covariance propagation rules.

A network is a straight pipeline of primitive layers; the generic Bayesian
layer ``A(W (D x) + b)`` is written as ``Dropout -> Linear -> Activation``.
Only the congruence ``W Sigma W^T`` is approximated (through
:func:`~dplrprop.decompose.fast_dplr`); dropout and weight-variance
corrections touch the diagonal exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy.special import expit, ndtr

from dplrprop import dplr
from dplrprop._linalg import rows_times
from dplrprop.config import TAG_DECOMPOSE, PropagationConfig, stream
from dplrprop.conv import conv2d, conv_operator, conv_output_hw
from dplrprop.decompose import decompose_arrays, dense_operator, lowrank_operator, lowrank_weight
from dplrprop.dplr import DplrMatrix, GaussianState
from dplrprop.errors import ShapeError

ACTIVATIONS = ("relu", "sigmoid", "tanh")
GH_NODES = 64

_gh_t, _gh_w = np.polynomial.hermite.hermgauss(GH_NODES)
_gh_w = _gh_w / math.sqrt(math.pi)
_gh_t = _gh_t * math.sqrt(2.0)


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _nonneg(name, a):
    a = _f64(a)
    if np.any(a < 0):
        idx = int(np.argmax(a.reshape(-1) < 0))
        raise ValueError(f"{name} has a negative entry at flat offset {idx}")
    return a


# ----------------------------------------------------------------------------
# layer descriptions


@dataclass(frozen=True, eq=False)
class Dropout:
    p: Union[float, np.ndarray]

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if np.any(p < 0) or np.any(p >= 1):
            raise ValueError("dropout probabilities must lie in [0, 1)")
        object.__setattr__(self, "p", p)

    def output_shape(self, in_shape):
        if self.p.ndim and self.p.size != int(np.prod(in_shape)):
            raise ShapeError(f"dropout has {self.p.size} probabilities for input of size {int(np.prod(in_shape))}")
        return in_shape


class _LinearBase:
    """Shared shape logic and operator cache for dense layers."""

    def output_shape(self, in_shape):
        m, n = self.W_mean.shape
        if tuple(in_shape) != (n,):
            raise ShapeError(f"linear layer expects input ({n},), got {tuple(in_shape)}")
        return (m,)

    def operator(self, weight_rank=None):
        q = None if weight_rank is None else min(weight_rank, *self.W_mean.shape)
        cache = self._ops
        if q not in cache:
            w_sq = np.square(self.W_mean)
            if q is None or q == min(self.W_mean.shape):
                cache[q] = dense_operator(self.W_mean, w_sq)
            else:
                cache[q] = lowrank_operator(lowrank_weight(self.W_mean, q), w_sq)
        return cache[q]


@dataclass(frozen=True, eq=False)
class LinearDet(_LinearBase):
    W_mean: np.ndarray
    b_mean: np.ndarray
    _ops: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "W_mean", _f64(self.W_mean))
        object.__setattr__(self, "b_mean", _f64(self.b_mean))
        if self.W_mean.ndim != 2 or self.b_mean.shape != self.W_mean.shape[:1]:
            raise ShapeError(f"bias {self.b_mean.shape} does not match weight {self.W_mean.shape}")


@dataclass(frozen=True, eq=False)
class LinearMeanField(_LinearBase):
    W_mean: np.ndarray
    b_mean: np.ndarray
    W_var: np.ndarray
    b_var: np.ndarray
    _ops: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "W_mean", _f64(self.W_mean))
        object.__setattr__(self, "b_mean", _f64(self.b_mean))
        object.__setattr__(self, "W_var", _nonneg("W_var", self.W_var))
        object.__setattr__(self, "b_var", _nonneg("b_var", self.b_var))
        if self.W_var.shape != self.W_mean.shape or self.b_var.shape != self.b_mean.shape:
            raise ShapeError("variance arrays must match the mean arrays")
        if self.b_mean.shape != self.W_mean.shape[:1]:
            raise ShapeError(f"bias {self.b_mean.shape} does not match weight {self.W_mean.shape}")


@dataclass(frozen=True, eq=False)
class LinearRowCov(_LinearBase):
    """Independent rows, row ``i`` covariance ``row_factors[i] @ row_factors[i].T``.

    ``row_factors`` has shape (m, n, s).
    """

    W_mean: np.ndarray
    b_mean: np.ndarray
    row_factors: np.ndarray
    _ops: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "W_mean", _f64(self.W_mean))
        object.__setattr__(self, "b_mean", _f64(self.b_mean))
        object.__setattr__(self, "row_factors", _f64(self.row_factors))
        m, n = self.W_mean.shape
        if self.row_factors.ndim != 3 or self.row_factors.shape[:2] != (m, n):
            raise ShapeError(f"row_factors must be ({m}, {n}, s), got {self.row_factors.shape}")
        if self.b_mean.shape != (m,):
            raise ShapeError(f"bias {self.b_mean.shape} does not match weight {self.W_mean.shape}")


@dataclass(frozen=True)
class Activation:
    kind: str
    cov_mode: Optional[str] = None  # None defers to PropagationConfig.act_mode

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.cov_mode not in (None, "taylor", "gauss"):
            raise ValueError(f"unknown covariance mode {self.cov_mode!r}")

    def output_shape(self, in_shape):
        return in_shape


class _ConvBase:
    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeError(f"conv layer needs (C, H, W) input, got {tuple(in_shape)}")
        o, c, kh, kw = self.kernel_mean.shape
        if in_shape[0] != c:
            raise ShapeError(f"conv layer expects {c} input channels, got {in_shape[0]}")
        return (o,) + conv_output_hw(in_shape[1], in_shape[2], kh, kw, self.stride, self.padding)

    def operator(self, in_shape):
        key = tuple(in_shape)
        if key not in self._ops:
            self._ops[key] = conv_operator(self.kernel_mean, key, self.stride, self.padding)
        return self._ops[key]

    def _check(self):
        if self.kernel_mean.ndim != 4 or self.bias_mean.shape != self.kernel_mean.shape[:1]:
            raise ShapeError(f"bias {self.bias_mean.shape} does not match kernel {self.kernel_mean.shape}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")


@dataclass(frozen=True, eq=False)
class Conv2dDet(_ConvBase):
    kernel_mean: np.ndarray
    bias_mean: np.ndarray
    stride: int = 1
    padding: int = 0
    _ops: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel_mean", _f64(self.kernel_mean))
        object.__setattr__(self, "bias_mean", _f64(self.bias_mean))
        self._check()


@dataclass(frozen=True, eq=False)
class Conv2dMeanField(_ConvBase):
    """Mean-field convolution.

    The weight-variance term is applied per output position as if every
    position had its own copy of the kernel; the cross-position covariance
    induced by shared kernel weights is not represented.
    """

    kernel_mean: np.ndarray
    bias_mean: np.ndarray
    kernel_var: np.ndarray
    bias_var: np.ndarray
    stride: int = 1
    padding: int = 0
    _ops: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kernel_mean", _f64(self.kernel_mean))
        object.__setattr__(self, "bias_mean", _f64(self.bias_mean))
        object.__setattr__(self, "kernel_var", _nonneg("kernel_var", self.kernel_var))
        object.__setattr__(self, "bias_var", _nonneg("bias_var", self.bias_var))
        self._check()
        if self.kernel_var.shape != self.kernel_mean.shape or self.bias_var.shape != self.bias_mean.shape:
            raise ShapeError("variance arrays must match the mean arrays")


@dataclass(frozen=True)
class Flatten:
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)


LayerSpec = Union[Dropout, LinearDet, LinearMeanField, LinearRowCov, Activation,
                  Conv2dDet, Conv2dMeanField, Flatten]


# ----------------------------------------------------------------------------
# helpers


def _congruence(state, op, cfg: PropagationConfig, key=0, init=None) -> DplrMatrix:
    """Fast DPLR approximation of ``W Sigma W^T`` for every batch item."""
    cov = state.cov
    m = op.out_dim
    if cov.is_zero():
        return DplrMatrix.zeros(m, cov.batch_shape)
    rank = min(cfg.rank, m)
    if init is None:
        init = stream(cfg.seed, TAG_DECOMPOSE, key).standard_normal((m, rank))
    lam, V = decompose_arrays(op, cov.lam, cov.factor, rank, cfg.iterations,
                              cfg.column_drop_tol, init, cfg.ritz)
    return DplrMatrix(lam, V)


def _second_moment_diag(state):
    return dplr.diagonal(state.cov) + np.square(state.mean)


# ----------------------------------------------------------------------------
# propagation rules


def prop_dropout(state: GaussianState, p, cfg: PropagationConfig = None) -> GaussianState:
    """Scaled-Bernoulli dropout: mean kept, ``(mu^2 + diag Sigma) p/q`` added to the diagonal."""
    p = np.asarray(p, dtype=np.float64)
    if np.any(p >= 1) or np.any(p < 0):
        raise ValueError("dropout probability must lie in [0, 1)")
    if not p.any():
        return state
    d = _second_moment_diag(state) * (p / (1.0 - p))
    return GaussianState(state.mean, dplr.add_diagonal(state.cov, d), state.shape)


def prop_linear_det(state, W_mean, b_mean, cfg: PropagationConfig, key=0, init=None, layer=None):
    layer = layer if layer is not None else LinearDet(W_mean, b_mean)
    layer.output_shape((state.dim,))
    mean = rows_times(state.mean, np.ascontiguousarray(layer.W_mean.T)) + layer.b_mean
    cov = _congruence(state, layer.operator(cfg.weight_rank), cfg, key, init)
    return GaussianState(mean, cov)


def prop_linear_meanfield(state, layer: LinearMeanField, cfg: PropagationConfig, key=0, init=None):
    out = prop_linear_det(state, None, None, cfg, key, init, layer=layer)
    delta = layer.b_var + rows_times(_second_moment_diag(state), np.ascontiguousarray(layer.W_var.T))
    return GaussianState(out.mean, dplr.add_diagonal(out.cov, delta))


def rowcov_diagonal(state, row_factors):
    """``SUM(F_i F_i^T * (Sigma + mu mu^T))`` for every output row ``i``."""
    m, n, s = row_factors.shape
    flat = np.ascontiguousarray(row_factors.transpose(1, 0, 2).reshape(n, m * s))
    cov = state.cov
    out = rows_times(cov.lam, np.ascontiguousarray(np.square(row_factors).sum(axis=2).T))
    mu_f = rows_times(state.mean, flat).reshape(state.mean.shape[:-1] + (m, s))
    out = out + np.square(mu_f).sum(axis=-1)
    if cov.rank:
        u_f = rows_times(np.swapaxes(cov.factor, -1, -2), flat)
        u_f = u_f.reshape(cov.factor.shape[:-2] + (cov.rank, m, s))
        out = out + np.square(u_f).sum(axis=(-3, -1))
    return out


def prop_linear_rowcov(state, layer: LinearRowCov, cfg: PropagationConfig, key=0, init=None):
    out = prop_linear_det(state, None, None, cfg, key, init, layer=layer)
    delta = rowcov_diagonal(state, layer.row_factors)
    return GaussianState(out.mean, dplr.add_diagonal(out.cov, delta))


def activation_fn(kind, x):
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return expit(x)
    return np.tanh(x)


def activation_derivative(kind, x):
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        return (x > 0).astype(np.float64)
    if kind == "sigmoid":
        s = expit(x)
        return s * (1.0 - s)
    if kind == "tanh":
        return 1.0 - np.square(np.tanh(x))
    raise ValueError(f"unknown activation {kind!r}")


def activation_moments(kind, mu, var) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and variance of ``A(x)`` for ``x ~ N(mu, var)``, elementwise.

    ReLU uses the closed form in terms of the normal cdf/pdf; sigmoid and
    tanh use 64-node Gauss-Hermite quadrature.
    """
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(var, dtype=np.float64)
    if np.any(var < 0):
        raise ValueError("variance must be nonnegative")
    mu, var = np.broadcast_arrays(mu, var)
    if not var.any():
        return activation_fn(kind, mu), np.zeros(mu.shape)
    sigma = np.sqrt(var)
    pos = sigma > 0
    safe = np.where(pos, sigma, 1.0)
    if kind == "relu":
        z = mu / safe
        # one special-function call: the smaller of cdf/tail directly, the other as 1 - it
        small = ndtr(-np.abs(z))
        neg = z < 0
        cdf = np.where(neg, small, 1.0 - small)
        tail = np.where(neg, 1.0 - small, small)
        pdf = np.exp(-0.5 * z * z) * (1.0 / math.sqrt(2.0 * math.pi))
        mean = mu * cdf + safe * pdf
        # variance / sigma^2, arranged to avoid cancellation for large |z|
        g = z * z * cdf * tail + cdf + z * pdf * (tail - cdf) - pdf * pdf
        v = np.clip(g, 0.0, 1.0) * var
    else:
        x = mu[..., None] + safe[..., None] * _gh_t
        fx = activation_fn(kind, x)
        mean = (fx * _gh_w).sum(axis=-1)
        v = np.maximum((np.square(fx - mean[..., None]) * _gh_w).sum(axis=-1), 0.0)
    mean = np.where(pos, mean, activation_fn(kind, mu))
    v = np.where(pos, v, 0.0)
    return mean, v


def prop_activation(state: GaussianState, layer: Activation, cfg: PropagationConfig) -> GaussianState:
    mode = layer.cov_mode or cfg.act_mode
    var = dplr.diagonal(state.cov)
    mean, out_var = activation_moments(layer.kind, state.mean, var)
    if mode == "taylor":
        d = activation_derivative(layer.kind, state.mean)
    elif mode == "gauss":
        sigma = np.sqrt(var)
        d = np.divide(np.sqrt(out_var), sigma, out=np.zeros_like(sigma), where=sigma > 0)
    else:
        raise ValueError(f"unknown covariance mode {mode!r}")
    return GaussianState(mean, dplr.scale_rows(state.cov, d), state.shape)


def _conv_mean(state, layer):
    c, h, w = state.shape
    x = state.mean.reshape(state.mean.shape[:-1] + (c, h, w))
    y = conv2d(x, layer.kernel_mean, layer.stride, layer.padding) + layer.bias_mean[:, None, None]
    return y.reshape(state.mean.shape[:-1] + (-1,)), y.shape[-3:]


def prop_conv_det(state, layer, cfg: PropagationConfig, key=0, init=None):
    if state.shape is None:
        raise ShapeError("convolution needs (C, H, W) shape metadata on the state")
    layer.output_shape(state.shape)
    mean, out_shape = _conv_mean(state, layer)
    cov = _congruence(state, layer.operator(state.shape), cfg, key, init)
    return GaussianState(mean, cov, out_shape)


def prop_conv_meanfield(state, layer: Conv2dMeanField, cfg: PropagationConfig, key=0, init=None):
    out = prop_conv_det(state, layer, cfg, key, init)
    second = _second_moment_diag(state).reshape(state.mean.shape[:-1] + tuple(state.shape))
    delta = conv2d(second, layer.kernel_var, layer.stride, layer.padding) + layer.bias_var[:, None, None]
    delta = delta.reshape(out.mean.shape)
    return GaussianState(out.mean, dplr.add_diagonal(out.cov, delta), out.shape)


def prop_flatten(state: GaussianState) -> GaussianState:
    return GaussianState(state.mean, state.cov, None)


def propagate_layer(state, layer, cfg: PropagationConfig, key=0, init=None) -> GaussianState:
    """Dispatch ``layer`` to its propagation rule."""
    if isinstance(layer, Dropout):
        return prop_dropout(state, layer.p, cfg)
    if isinstance(layer, LinearMeanField):
        return prop_linear_meanfield(state, layer, cfg, key, init)
    if isinstance(layer, LinearRowCov):
        return prop_linear_rowcov(state, layer, cfg, key, init)
    if isinstance(layer, LinearDet):
        return prop_linear_det(state, None, None, cfg, key, init, layer=layer)
    if isinstance(layer, Activation):
        return prop_activation(state, layer, cfg)
    if isinstance(layer, Conv2dMeanField):
        return prop_conv_meanfield(state, layer, cfg, key, init)
    if isinstance(layer, Conv2dDet):
        return prop_conv_det(state, layer, cfg, key, init)
    if isinstance(layer, Flatten):
        return prop_flatten(state)
    raise TypeError(f"unsupported layer {type(layer).__name__}")
