"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit 1, data
problems exit 2 and numeric failures exit 3.
"""


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class IngestionError(DataError):
    """A mandatory dataset file is missing or unreadable."""


class FormatError(DataError):
    """A dataset file is present but malformed."""


class SamplingError(DataError):
    """Not enough classes or graphs to build the requested episode."""


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
