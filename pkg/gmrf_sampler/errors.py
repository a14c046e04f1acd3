from typing import Any


class GmrfError(Exception):
    """Base class for every error raised by gmrf_sampler."""


class DimensionMismatchError(GmrfError, ValueError):
    pass


class NonFiniteInputError(GmrfError, ValueError):
    pass


class NotSPDError(GmrfError, ValueError):
    """A non-positive eigenvalue, pivot or Ritz value was found.

    `report` carries the sampler's diagnostics up to the failing iteration
    when the error comes from a Lanczos run.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index
        self.report: Any = None


class SymmetryError(GmrfError, ValueError):
    pass


class ImaginaryResidueError(GmrfError, ArithmeticError):
    pass


class MatrixMarketError(GmrfError, ValueError):
    pass


class DimensionCapError(GmrfError, ValueError):
    pass


class FactorizationBreakdownError(GmrfError, ArithmeticError):
    """Incomplete Cholesky hit a non-positive pivot even after shifting."""

    def __init__(self, message: str, row: int):
        super().__init__(message)
        self.row = row


class MissingCapabilityError(GmrfError, TypeError):
    pass


class DivergentStateError(GmrfError, FloatingPointError):
    pass


class DecayBoundError(GmrfError, ValueError):
    pass


__all__ = [
    "GmrfError",
    "DimensionMismatchError",
    "NonFiniteInputError",
    "NotSPDError",
    "SymmetryError",
    "ImaginaryResidueError",
    "MatrixMarketError",
    "DimensionCapError",
    "FactorizationBreakdownError",
    "MissingCapabilityError",
    "DivergentStateError",
    "DecayBoundError",
]
