"""Unsupervised 3D pose estimation trained only from foreground masks."""

from .errors import (
    ConfigError,
    DataError,
    DegenerateGeometryError,
    MaskPoseError,
    NumericError,
)
from .estimator import MaskPoseEstimator

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DataError",
    "DegenerateGeometryError",
    "MaskPoseError",
    "MaskPoseEstimator",
    "NumericError",
    "__version__",
]
