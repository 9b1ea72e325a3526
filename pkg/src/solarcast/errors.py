"""Exception hierarchy shared across the package."""


class SolarcastError(Exception):
    """Base class for all package errors."""


class RangeError(SolarcastError, ValueError):
    """An input lies outside its supported range."""


class ParameterError(SolarcastError, ValueError):
    """A model or algorithm parameter is invalid."""


class ShapeError(SolarcastError, ValueError):
    """Array shapes disagree with the declared contract."""


class CoverageError(SolarcastError, ValueError):
    """Two grids do not overlap enough for the requested operation."""


class FormatError(SolarcastError, IOError):
    """A binary file is malformed.

    ``offset`` is the byte position at which the problem was detected.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StatsError(SolarcastError, ValueError):
    """Normalization statistics cannot be computed."""


class UsageError(SolarcastError, RuntimeError):
    """An API was used out of order (e.g. backward without a graph)."""


class AlignmentError(SolarcastError, ValueError):
    """Forecasts and truth are not aligned."""


class AvailabilityError(SolarcastError, LookupError):
    """No meteorological run is available for the requested issue time."""


class ConfigError(SolarcastError, ValueError):
    """A run configuration is invalid."""


class NumericalError(SolarcastError, ArithmeticError):
    """Training diverged (non-finite loss)."""


class EmptyInputError(SolarcastError, ValueError):
    """A metric was asked to aggregate zero samples."""
