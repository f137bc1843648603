import numpy as np
import pytest

from dplrprop.dplr import DplrMatrix
from dplrprop.moments import (
    Activation,
    Conv2dDet,
    Conv2dMeanField,
    Dropout,
    Flatten,
    LinearDet,
    LinearMeanField,
    LinearRowCov,
)
from dplrprop.network import Model


def rel_fro(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = np.linalg.norm(b)
    return np.linalg.norm(a - b) / (denom if denom > 0 else 1.0)


def random_dplr(rng, n, r, lam_scale=1.0, lam_floor=0.0):
    lam = lam_floor + lam_scale * rng.random(n)
    return DplrMatrix(lam, rng.standard_normal((n, r)))


def random_pipeline(rng, widths_max=12, depth=4, kinds=None, conv=False, conv_shape=(2, 5, 5), dropout=None):
    """Random straight pipeline mixing layer kinds; output width <= widths_max."""
    layers = []
    if conv:
        c, h, w = shape = conv_shape
        o = int(rng.integers(1, 3))
        k = rng.standard_normal((o, c, 3, 3)) * 0.4
        if rng.random() < 0.5:
            layers.append(Conv2dDet(k, rng.standard_normal(o) * 0.1, stride=1, padding=1))
        else:
            layers.append(Conv2dMeanField(k, rng.standard_normal(o) * 0.1, 0.01 * rng.random(k.shape),
                                          0.01 * rng.random(o), stride=1, padding=1))
        layers.append(Activation("relu"))
        layers.append(Flatten())
        n = o * h * w
        input_shape = shape
    else:
        n = int(rng.integers(3, widths_max + 1))
        input_shape = (n,)
    kinds = kinds or ["det", "mf", "rowcov"]
    acts = ["relu", "sigmoid", "tanh"]
    for i in range(depth):
        m = int(rng.integers(2, widths_max + 1))
        if rng.random() < 0.6:
            layers.append(Dropout(float(rng.uniform(0.05, 0.4)) if dropout is None else dropout))
        kind = kinds[int(rng.integers(len(kinds)))]
        W = rng.standard_normal((m, n)) / np.sqrt(n)
        b = 0.1 * rng.standard_normal(m)
        if kind == "det":
            layers.append(LinearDet(W, b))
        elif kind == "mf":
            layers.append(LinearMeanField(W, b, 0.02 * rng.random((m, n)), 0.01 * rng.random(m)))
        else:
            layers.append(LinearRowCov(W, b, 0.1 * rng.standard_normal((m, n, 2))))
        if i < depth - 1:
            layers.append(Activation(acts[int(rng.integers(len(acts)))]))
        n = m
    return Model(layers, input_shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
