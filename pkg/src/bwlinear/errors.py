"""Exception hierarchy.

Every error raised on purpose by the package derives from
:class:`BwLinearError`. The CLI maps :class:`PreconditionError` subclasses to
exit code 2 and everything else to exit code 1.
"""


class BwLinearError(Exception):
    """Base class for package errors."""


class PreconditionError(BwLinearError, ValueError):
    """An input violates a documented precondition."""


class InputError(PreconditionError):
    """Malformed input: wrong shape, non-finite entries, bad arguments."""


class NotPsdError(PreconditionError):
    """A matrix expected to be positive semidefinite is not."""


class SingularityError(BwLinearError, ArithmeticError):
    """A matrix that must be inverted is (numerically) singular."""


class RankError(PreconditionError):
    """A matrix rank is incompatible with the requested operation."""


class TauTooLargeError(PreconditionError):
    """The smoothing parameter exceeds an eigenvalue it must stay below."""


class NonDistinctSpectrumError(PreconditionError):
    """The target spectrum has (numerically) repeated eigenvalues."""


class CombinatorialLimitError(PreconditionError):
    """An enumeration would be too large to carry out."""


class MdmFailedError(PreconditionError):
    """The deficiency margin of an initialization is not positive."""

    def __init__(self, message: str, margin: float | None = None):
        super().__init__(message)
        self.margin = margin


class DivergenceError(BwLinearError, ArithmeticError):
    """An optimization run blew up."""


class StepSizeUnderflowError(BwLinearError, ArithmeticError):
    """The adaptive integrator step collapsed below machine resolution."""


class InsufficientDataError(PreconditionError):
    """Not enough usable samples for an estimate."""


class DimensionLimitError(PreconditionError):
    """A dense assembly would exceed the supported size."""


class ConsistencyError(BwLinearError, ArithmeticError):
    """An internal numerical consistency check failed."""
