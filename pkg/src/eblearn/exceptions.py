"""Exception types raised across the package."""


class EBLError(Exception):
    """Base class for all package errors."""


class ShapeError(EBLError, ValueError):
    """Raised when tensor shapes are inconsistent with an operation."""


class PoolIndexError(EBLError, ValueError):
    """Raised when a pool index map is inconsistent with the tensor it addresses."""


class NudgingError(EBLError, ValueError):
    """Raised for an invalid nudging parameter.

    Covers both a zero nudging value for rules that divide by it and
    nudging strengths with ``1 + 2 * beta <= 0``, for which the augmented
    output energy is unbounded below.
    """


class DivergenceError(EBLError, FloatingPointError):
    """Raised when a relaxation or adjoint iteration produces non-finite values."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class DomainError(EBLError, ValueError):
    """Raised when an argument lies outside the domain of an analytic model."""


class FormatError(EBLError, ValueError):
    """Raised when a data, parameter or checkpoint file is malformed."""
