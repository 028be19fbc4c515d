"""Exception types shared across the package."""


class ClbartError(Exception):
    """Base class for all validation and fitting errors."""


class MalformedStratumError(ClbartError):
    """A stratum does not contain exactly one case row."""

    def __init__(self, stratum_id, n_cases):
        self.stratum_id = stratum_id
        self.n_cases = n_cases
        super().__init__(
            f"stratum {stratum_id!r} has {n_cases} case rows (expected exactly 1)"
        )


class DesignViolationError(ClbartError):
    """A moderator column varies within a stratum."""


class ParseError(ClbartError):
    """Malformed or missing value in an input file."""

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class CoverageError(ClbartError):
    """A covariate series is missing a required referent date."""


class IdentifiabilityError(ClbartError):
    """The information matrix is numerically singular."""


class ConvergenceError(ClbartError):
    """An iterative fit failed to converge."""


class EmptyCohortError(ClbartError):
    """A simulated cohort produced no cases."""


class LogConcavityError(ClbartError):
    """The rejection-sampling target is not log-concave; indicates a bug."""


class ModeratorKindError(ClbartError):
    """An operation requires a binary moderator but got a continuous one."""
