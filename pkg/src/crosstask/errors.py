"""Exception types shared across the package."""


class CrosstaskError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(CrosstaskError, ValueError):
    """Invalid configuration value (bad hyperparameter, unknown key, ...)."""


class DimensionError(CrosstaskError, ValueError):
    """Array extents incompatible with the requested operation."""


class IngestionError(CrosstaskError, ValueError):
    """Malformed dataset file; message carries the offending row when known."""


class UndefinedMetricError(CrosstaskError, ValueError):
    """Metric has no defined value on the given inputs (e.g. one-class AUROC)."""


class UndefinedCorrelationError(CrosstaskError, ValueError):
    """Rank correlation undefined (constant series)."""


class NonFiniteError(CrosstaskError, RuntimeError):
    """A loss or gradient became NaN/Inf during optimization."""


class ExperimentError(CrosstaskError, RuntimeError):
    """Experiment-level failure (missing cells, inconsistent artifacts)."""
