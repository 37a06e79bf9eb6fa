"""Exception types shared across the package."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class ConfigError(ValueError):
    """A configuration is inconsistent or incomplete."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite or degenerate value."""
