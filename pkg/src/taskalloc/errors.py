"""Exception hierarchy shared by all modules."""


class TaskAllocError(Exception):
    """Base class for all errors raised by :mod:`taskalloc`."""


class ConfigurationError(TaskAllocError, ValueError):
    """Inconsistent dimensions, invalid parameters or a malformed config."""


class SingularityError(TaskAllocError, ArithmeticError):
    """A quantity is evaluated where it is unbounded or undefined."""


class DomainError(TaskAllocError, ValueError):
    """An argument lies outside the mathematical domain of a function."""


class GInfeasibleError(TaskAllocError):
    """No non-negative profile ``y`` satisfies ``F(q, y) = w``."""


class IntegrationInstabilityError(TaskAllocError):
    """A post-step correction exceeded its tolerance; reduce ``dt``."""

    def __init__(self, message, step=None, time=None, magnitude=None):
        super().__init__(message)
        self.step = step
        self.time = time
        self.magnitude = magnitude


class UnboundedTrajectoryError(IntegrationInstabilityError):
    """``max |q|`` left the monitored bound."""


class InfeasibilityError(TaskAllocError):
    """The optimal stationary pair problem has no feasible point."""


class SamplingError(TaskAllocError):
    """The constraint sampler exhausted its redraw budget."""


class DesignInfeasibleError(TaskAllocError):
    """The margin LP for ``G`` is infeasible or its optimal margin is <= 0."""

    def __init__(self, message, margin=None, worst_samples=()):
        super().__init__(message)
        self.margin = margin
        self.worst_samples = list(worst_samples)
