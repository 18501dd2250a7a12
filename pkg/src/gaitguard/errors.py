"""Exception types shared across the toolkit.

The CLI maps ValidationError (and subclasses) to exit code 1 and I/O
failures to exit code 2.
"""


class GaitGuardError(Exception):
    """Base class for all toolkit errors."""

    code = "error"


class ValidationError(GaitGuardError):
    """Input violates a documented contract."""

    code = "validation"


class ParseError(ValidationError):
    """A file could not be parsed; carries the offending line number."""

    code = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class InsufficientDataError(ValidationError):
    """Not enough valid observations to run an operation."""

    code = "insufficient-data"


class AmbiguousDirectionError(ValidationError):
    """Net horizontal displacement too small to decide a walking direction."""

    code = "ambiguous-direction"


class DegenerateCalibrationError(ValidationError):
    """Marker calibration with zero pixel distance."""

    code = "degenerate-calibration"


class ConfigError(ValidationError):
    """Unknown or inconsistent configuration value."""

    code = "config"


class ShapeError(ValidationError):
    """Array or vector dimensions do not match."""

    code = "shape"


class StratificationError(ValidationError):
    """A class has too few rows for the requested fold count."""

    code = "stratification"


class DegenerateDatasetError(ValidationError):
    """Dataset unusable for training (e.g. a single class)."""

    code = "degenerate-dataset"


class UndefinedMetricError(ValidationError):
    """Metric has no defined value for this input (e.g. all-zero matrix)."""

    code = "undefined-metric"
