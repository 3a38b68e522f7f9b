"""Exception types shared across the package."""


class SeidError(Exception):
    """Base class for all package errors."""


class ShapeError(SeidError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(SeidError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(SeidError, ValueError):
    """An architecture or run configuration is invalid or infeasible."""
