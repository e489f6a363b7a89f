"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid run configuration or column-role mapping."""


class DataError(ValueError):
    """Input data cannot support the requested operation."""


class UndefinedCorrelation(ValueError):
    """Correlation is undefined (constant input or too few observations)."""


class LeakageError(ValueError):
    """An excluded column was requested as a candidate."""
