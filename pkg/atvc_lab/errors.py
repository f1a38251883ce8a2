# atvc_lab/errors.py

from typing import Optional


class AtvcLabError(Exception):
    """Base class for every error raised by the lab."""


class ConfigurationError(AtvcLabError, ValueError):
    """A configuration value is missing, unknown or out of range."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ContractError(AtvcLabError, ValueError):
    """An operation was called with arguments that break its contract."""


class SchedulerIndexError(AtvcLabError, IndexError):
    """A scheduler id outside [0, M) was requested."""


class NumericError(AtvcLabError, ArithmeticError):
    """Iterative numerics failed to converge or produced non-finite values."""

    def __init__(self, message: str, diagnostics_path: Optional[str] = None):
        self.diagnostics_path = diagnostics_path
        super().__init__(message)


class CompatibilityError(AtvcLabError, ValueError):
    """A checkpoint does not fit the environment it is evaluated on."""


class UnsupportedError(AtvcLabError, ValueError):
    """The requested experiment is not defined for this configuration."""
