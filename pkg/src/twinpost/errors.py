"""Exception types shared across the package."""


class TwinpostError(Exception):
    """Base class for all package errors."""


class ParameterError(TwinpostError, ValueError):
    """A field, detector or criterion parameter is outside its domain."""


class TruncationError(TwinpostError):
    """A requested truncation leaves more probability mass outside the grid
    than the configured budget allows."""

    def __init__(self, message, suggested_cutoffs=None):
        super().__init__(message)
        self.suggested_cutoffs = suggested_cutoffs


class TruncationWarning(UserWarning):
    """Truncated tail mass may bias a derived quantity (e.g. a high moment)."""


class PrecisionError(TwinpostError, ArithmeticError):
    """A numerical evaluation lost more significance than can be recovered."""


class PrecisionWarning(UserWarning):
    """Result contains entries with reduced significance."""


class ShapeError(TwinpostError, ValueError):
    """Array operands do not share a compatible support grid."""


class EmptyPostselectionError(TwinpostError):
    """Conditioning slice carries zero probability mass."""


class DegenerateModelError(TwinpostError):
    """Detection model assigns zero probability to observed data."""


class DegenerateDistributionError(TwinpostError):
    """A statistic is undefined for this distribution (zero mean/variance)."""


class MappingUndefinedError(TwinpostError):
    """Probability-based criterion mapping requires a nonzero vacuum entry."""


class IncompleteMomentsError(TwinpostError, KeyError):
    """A moment transform needs lower-order moments that are not present."""


class FitError(TwinpostError):
    """Model fit failed to converge or produced unphysical parameters."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class InsufficientStatisticsError(FitError):
    """Empirical moments are too noisy for the requested reconstruction
    (e.g. a negative empirical intensity variance)."""


class InfeasibleIntervalError(FitError):
    """The feasible interval for the fit's free parameter is empty."""


class InputError(TwinpostError, ValueError):
    """Malformed user input (config file, CSV, CLI arguments)."""
