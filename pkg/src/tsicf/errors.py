"""Exception types shared across the package."""


class TsicfError(Exception):
    """Base class for all package errors."""


class ShapeError(TsicfError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(TsicfError, ValueError):
    """A documented precondition was violated by the caller."""


class CapacityError(ContractError):
    """A context exceeds the configured example count or example length."""


class DataError(TsicfError, ValueError):
    """Input data could not be parsed or is inconsistent."""


class CheckpointError(TsicfError):
    """A checkpoint is malformed or does not match the model configuration."""


class NumericError(TsicfError, ArithmeticError):
    """A computation produced a non-finite value."""


class ConfigError(ContractError):
    """A run configuration value is missing or invalid."""
