"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid construction parameters (dimensions, horizons, bounds)."""


class ContractViolation(ValueError):
    """An argument broke an operation's shape or protocol contract."""


class SingularSystemError(ArithmeticError):
    """Normal equations could not be factorized."""


class UnsupportedCostError(TypeError):
    """The cost kind does not provide what the operation needs."""


class InsufficientDataError(ValueError):
    """Too few usable points for a fit."""
