"""Exception hierarchy shared across the package.

The CLI maps these onto exit statuses: validation problems (ConfigError,
DomainError, DataFormatError) exit 1, numeric failures (NumericError and
subclasses) exit 2, operating-system I/O failures exit 3.
"""


class SpreadDesignError(Exception):
    """Base class for all package errors."""


class DomainError(SpreadDesignError):
    """Invalid domain object or argument (empty grid, bad design index, ...)."""


class ConfigError(SpreadDesignError):
    """Malformed or inconsistent run configuration."""


class DataFormatError(SpreadDesignError):
    """Input file that does not follow the documented text formats."""


class NumericError(SpreadDesignError):
    """Non-finite values or other numerical failure during computation."""


class StabilityError(NumericError):
    """Explicit time step violates the stability bound of the propagator."""
