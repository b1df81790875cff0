"""Exception hierarchy shared by the solver and oracle modules."""


class FFOError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatch(FFOError, ValueError):
    pass


class NotPositiveDefinite(FFOError, ValueError):
    pass


class UnknownPreset(FFOError, KeyError):
    pass


class NotStronglyConvex(FFOError, ValueError):
    pass


class RankDeficient(FFOError, ArithmeticError):
    pass


class SingularKkt(FFOError, ArithmeticError):
    pass


class Infeasible(FFOError, RuntimeError):
    pass


class MaxIterExceeded(FFOError, RuntimeError):
    """Solver ran out of iterations.

    The best iterate found is attached as ``solution`` with
    ``certified=False`` so callers can still inspect it.
    """

    def __init__(self, message, solution=None):
        super().__init__(message)
        self.solution = solution


class UncertifiedSolution(FFOError, ValueError):
    pass


class LicqViolation(FFOError, ArithmeticError):
    pass


class DegenerateActiveSet(FFOError, ValueError):
    pass


class TrainingAborted(FFOError, RuntimeError):
    """A solver failure stopped training; ``trace`` holds the completed steps."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class DerivativeMismatch(FFOError, ValueError):
    """A derivative callback disagrees with finite differences of its value callback."""
