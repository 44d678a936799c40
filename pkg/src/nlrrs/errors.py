"""Exception types shared across the package."""


class NlrrsError(Exception):
    """Base class for all package-specific errors."""


class DomainError(NlrrsError, ValueError):
    """An argument lies outside its documented domain."""


class RankDeficiencyError(NlrrsError):
    """A design matrix that must have full column rank does not."""


class InfeasibleError(NlrrsError):
    """A linear program has an empty feasible region."""


class SimplexNumericalError(NlrrsError):
    """The simplex iteration stalled or lost numerical stability."""


class AllRestartsDivergedError(NlrrsError):
    """Every multistart run of the quantile solver produced non-finite values."""


class DegenerateActiveSetError(NlrrsError):
    """The rank-score system at a quantile fit admits no valid solution."""


class SingularCovarianceError(NlrrsError):
    """The studentizing matrix of a test statistic is numerically singular."""


class McFailureRateError(NlrrsError):
    """Too many Monte Carlo replications failed to converge."""
