"""Exception types shared across the package."""


class MccfError(Exception):
    """Base class for all package errors."""


class ContractError(MccfError, ValueError):
    """A precondition on an argument was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested operation."""


class NumericError(MccfError, ArithmeticError):
    """A non-finite value appeared where finite values are required."""


class ParseError(ContractError):
    """Malformed input file content."""


class ConfigError(ContractError):
    """Invalid configuration value or key."""


class SamplingError(ContractError):
    """A batch could not be drawn from the available data."""
