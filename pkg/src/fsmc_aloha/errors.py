"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when a model input violates its documented contract."""


class NoUniqueStationaryError(ValueError):
    """Raised when a Markov chain has more than one recurrent class."""


class NullEventError(ValueError):
    """Raised when conditioning on an event of probability zero."""


class TimeScaleError(ValueError):
    """Raised when lambda*tau + mu*tau exceeds one for a queue transition."""


class ConvergenceError(RuntimeError):
    """Raised when an iterative solver does not reach its tolerance."""

    def __init__(self, message, span=None, iterations=None):
        super().__init__(message)
        self.span = span
        self.iterations = iterations


class PolicyTableMissError(KeyError):
    """Raised when an online table lookup hits a state with no entry."""
