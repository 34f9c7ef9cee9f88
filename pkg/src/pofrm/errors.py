"""Exception and warning classes raised across the package."""


class PofrmError(Exception):
    """Base class for all package errors."""


class InvalidArgumentError(PofrmError, ValueError):
    pass


class DomainError(PofrmError, ValueError):
    """A point or grid lies outside the domain of a basis."""


class EmptyMaskError(PofrmError, ValueError):
    """A sample has no observed entries."""


class SingularSystemError(PofrmError, ArithmeticError):
    """Observed data cannot identify the penalty null space."""


class DimensionMismatchError(PofrmError, ValueError):
    pass


class NumericalRankError(PofrmError, ArithmeticError):
    """Zero and nonzero eigenvalues of a penalty cannot be separated."""


class RankDeficiencyError(PofrmError, ArithmeticError):
    """The unpenalized part of the design is not of full column rank."""


class NonConvergenceError(PofrmError, RuntimeError):
    """The fitting loop hit its iteration cap.

    The last iterate is kept on ``self.fit`` for inspection.
    """

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class InsufficientCompletenessError(PofrmError, ValueError):
    """The imputation baseline cannot be estimated from the available data."""


class GapPlacementError(PofrmError, RuntimeError):
    pass


class ParseError(PofrmError, ValueError):
    pass


class SchemaError(PofrmError, ValueError):
    pass


class VersionMismatchError(PofrmError, ValueError):
    pass


class SeparationWarning(UserWarning):
    """Binomial fit with a large share of extreme linear predictor values."""


class RidgeWarning(UserWarning):
    """A small ridge was added to rescue a numerically singular system."""
