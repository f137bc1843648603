"""Sample-free moment propagation for Bayesian neural networks.

Means are carried as vectors and covariances in diagonal-plus-low-rank
form ``diag(lam) + U U^T`` so that a full uncertainty estimate costs about
as much as a handful of plain forward passes.
"""

from dplrprop.dplr import DplrMatrix, GaussianState
from dplrprop.decompose import (
    CongruenceOperator,
    DecomposeConfig,
    LowRankWeight,
    fast_dplr,
    lowrank_weight,
)
from dplrprop.network import Model, PropagationConfig, load_model, propagate, propagate_batch, save_model

__version__ = "0.1.0"

__all__ = [
    "CongruenceOperator",
    "DecomposeConfig",
    "DplrMatrix",
    "GaussianState",
    "LowRankWeight",
    "Model",
    "PropagationConfig",
    "fast_dplr",
    "load_model",
    "lowrank_weight",
    "propagate",
    "propagate_batch",
    "save_model",
]
