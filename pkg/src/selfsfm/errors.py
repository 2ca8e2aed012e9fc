"""Exception types shared across the package."""


class SfmError(Exception):
    """Base class for all package errors."""


class DimensionError(SfmError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(SfmError, ValueError):
    """An input lies outside the domain where the operation is defined."""


class ContractError(SfmError, RuntimeError):
    """A caller broke an API precondition (e.g. backward on a non-scalar)."""


class DivergenceError(SfmError, RuntimeError):
    """Optimization produced non-finite values."""

    def __init__(self, message, last_state=None):
        super().__init__(message)
        self.last_state = last_state


class FormatError(SfmError, ValueError):
    """A file or config does not follow the expected format."""


class ConfigError(FormatError):
    """A run configuration is malformed or names an unknown key."""
