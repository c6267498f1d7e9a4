"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """A value lies outside the mathematical domain of an operation."""


class ContractError(RuntimeError):
    """A caller violated a documented precondition."""


class InputError(ValueError):
    """User-supplied data is unusable (missing files, single-class sets, ...)."""


class NumericalError(ArithmeticError):
    """NaN or Inf appeared where finite values are required."""
