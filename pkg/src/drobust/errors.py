"""Exception types shared across the package.

Each class carries the process exit code the command-line harness uses
when the error escapes to the top level.
"""


class DrobustError(Exception):
    exit_code = 1


class ConfigurationError(DrobustError, ValueError):
    """Invalid configuration: bad fold counts, mismatched folds/models, ..."""

    exit_code = 2


class DataError(DrobustError, ValueError):
    """Malformed or out-of-contract data (rewards outside [0, 1], bad CSV)."""

    exit_code = 3


class ShapeError(DataError):
    pass


class DomainError(DrobustError, ValueError):
    """A numeric argument is outside the domain of the function."""

    exit_code = 2


class OverlapError(DataError):
    """Behavior propensity is zero at a logged action."""


class DegenerateWeightsError(DataError):
    pass


class DegenerateFitError(DataError):
    pass


class DrNegativeWError(DrobustError):
    """The doubly robust W estimate is nonpositive on the whole alpha range."""

    exit_code = 4


class OptimizationFailure(DrobustError):
    exit_code = 4

    def __init__(self, message, traces=None):
        super().__init__(message)
        self.traces = traces or []
