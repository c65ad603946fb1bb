"""Exception hierarchy shared across the package."""


class PlabError(Exception):
    """Base class for all errors raised by plab."""


class InvalidInputError(PlabError):
    """Numeric input violates a precondition (non-finite entries, bad rank)."""


class ShapeMismatchError(PlabError):
    """Operands of a tensor op have incompatible shapes."""


class ContractError(PlabError):
    """An API was called in a way its contract forbids (non-scalar loss, empty list)."""


class ConfigError(PlabError):
    """A configuration value violates an invariant; the message names it."""


class NotPositiveDefiniteError(PlabError):
    """A matrix required to be SPD failed its Cholesky factorization."""


class NumericError(PlabError):
    """A numeric routine failed to converge or produced non-finite values."""


class UnknownComponentError(PlabError, KeyError):
    """A layer/series lookup referenced a component that was never recorded."""
