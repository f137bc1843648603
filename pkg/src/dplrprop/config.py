"""Propagation settings and the seed-splitting scheme."""

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

ACT_MODES = ("taylor", "gauss")

# purpose tags for np.random.default_rng([seed, tag, index])
TAG_DECOMPOSE = 1
TAG_MC = 2
TAG_GEN_MODEL = 3
TAG_BENCH = 4


def stream(seed, tag, *index):
    """Independent generator for ``(seed, purpose tag, index...)``."""
    return np.random.default_rng([int(seed), int(tag), *(int(i) for i in index)])


@dataclass(frozen=True)
class PropagationConfig:
    """Settings for the fast path.

    ``rank`` is the DPLR factor width kept after every linear or conv
    layer, ``iterations`` the number of subspace-iteration rounds and
    ``weight_rank`` (optional) swaps dense linear weights for a truncated
    SVD inside the covariance update.
    """

    rank: int = 2
    iterations: int = 3
    act_mode: str = "gauss"
    weight_rank: Optional[int] = None
    seed: int = 0
    column_drop_tol: float = 1e-12
    solve_jitter: float = 0.0
    ritz: bool = True
    warm_start: bool = False

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.act_mode not in ACT_MODES:
            raise ValueError(f"act_mode must be one of {ACT_MODES}, got {self.act_mode!r}")
        if self.weight_rank is not None and self.weight_rank < 1:
            raise ValueError("weight_rank must be >= 1")
        if self.solve_jitter < 0:
            raise ValueError("solve_jitter must be >= 0")

    def to_dict(self):
        return asdict(self)
