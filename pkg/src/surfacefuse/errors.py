"""Exception types shared across the package.

Validation failures are ValueError subclasses (CLI exit code 1);
NumericError marks runtime numeric trouble (CLI exit code 2).
"""


class InvalidParameterError(ValueError):
    """A scalar argument is outside its legal range."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class SequenceLengthError(ValueError):
    """Input sequence is empty or longer than the configured maximum."""


class DegenerateMaskError(ValueError):
    """Masking would remove all remaining fusion weight for some slot."""


class DataError(ValueError):
    """Dataset files are malformed or inconsistent."""


class ConfigError(ValueError):
    """Run configuration is missing fields or fails validation."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or failed a numeric check."""
