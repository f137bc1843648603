"""Exception types raised across the package."""

import numpy as np


class ShapeError(ValueError):
    """Array shapes do not chain or do not match a declared dimension."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class SingularCovarianceError(np.linalg.LinAlgError):
    """The diagonal part of a covariance is too small to invert."""

    def __init__(self, index, value, tol):
        self.index = index
        self.value = value
        super().__init__(
            f"diagonal entry {index} is {value:.3g} <= {tol:.3g}; "
            "add jitter with add_diagonal before solving"
        )


class ModelFormatError(ValueError):
    """A model directory is malformed. Message names the layer and field."""


class ModelFileNotFound(ModelFormatError):
    """The manifest or a payload file it names does not exist."""
