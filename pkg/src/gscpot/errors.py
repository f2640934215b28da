"""Exception types raised across the toolkit."""


class GSCError(Exception):
    """Base class for all toolkit errors."""


class NonFiniteError(GSCError, FloatingPointError):
    """A NaN or infinity appeared in a state update."""

    def __init__(self, message, position=None):
        super().__init__(message)
        self.position = position


class ConvergenceError(GSCError):
    """An iterative solve stopped before reaching its tolerance.

    ``last`` holds the final iterate so callers can inspect or reuse it.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class SingularHessianError(GSCError):
    """A Hessian needed for an inverse was (numerically) singular."""


class BracketError(GSCError):
    """Both ends of a bisection bracket gave the same answer."""


class ConfigError(GSCError):
    """Invalid experiment configuration; ``key`` is the dotted key path."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key
