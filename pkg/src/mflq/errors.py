"""Exception hierarchy shared by the solvers and the command line."""


class MflqError(Exception):
    """Base class for all errors raised by this package."""

    #: process exit code used by the command line front end
    exit_code = 3


class DimensionError(MflqError, ValueError):
    exit_code = 1


class NotSolvable(MflqError):
    """A Lyapunov system is singular or its solution fails the residual check."""

    exit_code = 2


class NotStabilizer(MflqError):
    exit_code = 2


class PdcViolated(MflqError):
    exit_code = 2


class SingularInnerTerm(MflqError):
    """``D'PD + R`` (or its hatted analogue) cannot be inverted."""

    exit_code = 2


class MaxIterationsExceeded(MflqError):
    exit_code = 3


class RankDeficient(MflqError):
    """A least-squares system lost column rank."""

    exit_code = 3

    def __init__(self, message, rank=None, cols=None, which=None):
        super().__init__(message)
        self.rank = rank
        self.cols = cols
        self.which = which


class Diverged(MflqError):
    """Simulation produced a non-finite state."""

    exit_code = 3

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
