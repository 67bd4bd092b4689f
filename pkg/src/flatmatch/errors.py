"""Exception hierarchy shared by every module."""


class FlatMatchError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FlatMatchError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FlatMatchError, ValueError):
    """A precondition of an operation was violated by the caller."""


class DomainError(FlatMatchError, ValueError):
    """A value lies outside the mathematical domain of an operation."""


class NumericError(FlatMatchError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(FlatMatchError, ValueError):
    """Invalid experiment, dataset or optimizer configuration.

    ``field`` names the offending dotted config path when known.
    """

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field
