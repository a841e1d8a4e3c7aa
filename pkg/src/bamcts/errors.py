"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value (sizes, rates, flags)."""


class ShapeError(ValueError):
    """Array dimensions do not match a declared interface."""


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


class DataError(ValueError):
    """Input data violates a content contract (empty, non-finite, malformed)."""


class ContractError(ValueError):
    """A caller-supplied value breaks an operation's precondition."""


class CapacityError(RuntimeError):
    """An enumeration exceeded its configured budget."""
