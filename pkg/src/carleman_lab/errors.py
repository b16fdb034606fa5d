"""Exception types shared across the package."""


class CarlemanLabError(Exception):
    """Base class for all package errors."""


class ValidationError(CarlemanLabError):
    """Raised when inputs violate a documented precondition.

    The message names the violated constraint and, where it makes sense,
    the offending node or value.
    """


class SolverError(CarlemanLabError):
    """Raised when an iterative solver fails to reach its tolerance."""
