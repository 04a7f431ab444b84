"""Exception hierarchy shared by every module of the package."""


class EoslabError(Exception):
    """Base class for all errors raised by eoslab."""


class InstanceError(EoslabError, ValueError):
    """A point does not match the problem it is evaluated against."""


class DomainError(EoslabError, ValueError):
    """Input lies outside the domain where an operation is defined."""


class DegenerateError(EoslabError, ArithmeticError):
    """A quantity that must be nonzero vanished (zero gradient, singular denominator)."""


class UnsupportedOrderError(EoslabError, ValueError):
    """Requested derivative order is not implemented."""


class NumericalError(EoslabError, ArithmeticError):
    """An iterative numerical routine failed (e.g. a bisection bracket did not straddle the root)."""


class ConfigError(EoslabError, ValueError):
    """Invalid experiment or map configuration."""
