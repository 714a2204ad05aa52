"""Exception types raised across the package."""

from __future__ import annotations


class GplarError(Exception):
    """Base class for all package errors."""


class NumericalError(GplarError):
    """A computation failed for numerical rather than usage reasons."""


class InvalidKernelSpec(GplarError, ValueError):
    pass


class ShapeError(GplarError, ValueError):
    pass


class NotSymmetricError(GplarError, ValueError):
    pass


class NotPositiveDefinite(NumericalError):
    """Cholesky hit a non-positive pivot.

    ``pivot`` is 1-based, matching the order of the leading minor that
    failed (LAPACK convention).
    """

    def __init__(self, pivot: int, message: str | None = None):
        self.pivot = int(pivot)
        super().__init__(message or f"matrix is not positive definite (failed at pivot {self.pivot})")


class DegenerateConditional(NumericalError):
    def __init__(self, index: int, variance: float, reference: float):
        self.index = index
        self.variance = variance
        super().__init__(
            f"conditional variance at step {index} is {variance:.3e} "
            f"(< 1e-12 * {reference:.3e}); increase the jitter"
        )


class NonFiniteLoss(NumericalError):
    def __init__(self, term: str):
        self.term = term
        super().__init__(f"non-finite value in loss term '{term}'")


class TrainingDiverged(NumericalError):
    """Raised by the trainer; carries the last finite parameters and history."""

    def __init__(self, step: int, term: str, params, history):
        self.step = step
        self.term = term
        self.params = params
        self.history = history
        super().__init__(f"training diverged at step {step}: non-finite '{term}'")
