"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericError -> 4. Everything else is an ordinary crash (exit 1).
"""


class MaskPoseError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MaskPoseError):
    """Invalid or inconsistent configuration."""


class DataError(MaskPoseError):
    """Missing, malformed, or corrupted dataset/checkpoint files."""


class NumericError(MaskPoseError):
    """Numeric failure at runtime (non-finite loss, invalid geometry)."""


class DegenerateGeometryError(NumericError):
    """Triangulation or alignment problem has no unique solution."""
