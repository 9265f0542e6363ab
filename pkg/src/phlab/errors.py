"""Exception hierarchy shared by all modules.

The CLI maps :class:`SchemaError` to exit code 2 and :class:`NumericalError`
to exit code 3.
"""


class PhlabError(Exception):
    """Base class for every error raised by the package."""


class SchemaError(PhlabError, ValueError):
    """Invalid configuration or violated structural invariant."""


class NumericalError(PhlabError, ArithmeticError):
    """A numerical procedure did not reach its documented accuracy."""


class ConvergenceError(NumericalError):
    """Iteration (Newton, cocycle deepening, series truncation) failed to settle."""


class BudgetExceeded(NumericalError):
    """A point or iteration budget ran out; ``partial`` holds what was computed."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class DegenerateCoupling(NumericalError):
    """Two pasts are not transverse enough to form a quadrilateral."""


class GeometryError(NumericalError):
    """A curve construction failed (empty trim, no crossing, step rejection)."""
