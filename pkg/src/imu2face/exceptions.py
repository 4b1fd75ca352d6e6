"""Exception types shared across the pipeline."""


class ConfigError(ValueError):
    """Inconsistent or unknown configuration."""


class DataError(ValueError):
    """Malformed or physically inconsistent input data."""


class GeometryError(ValueError):
    """Degenerate geometry (coincident or collinear points)."""


class NumericalError(FloatingPointError):
    """Divergence or non-finite values during optimization."""
