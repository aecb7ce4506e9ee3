"""Exception types shared across the package."""


class TargetcalError(Exception):
    """Base class for all errors raised by this package."""


class ModeError(TargetcalError):
    """Dataset sample structure is incompatible with the requested operation."""


class SchemaError(TargetcalError):
    """Input file does not conform to the expected CSV schema."""


class ConfigError(TargetcalError):
    """Invalid run configuration."""


class RankDeficientError(TargetcalError):
    """A design or constraint matrix is numerically column-rank deficient."""


class NonFiniteError(TargetcalError):
    """A transformation or computation produced NaN or infinity."""


class EmptyTargetError(TargetcalError):
    """No target-sample units available."""


class EmptyArmError(TargetcalError):
    """A required treatment arm contains no units."""


class ZeroVarianceError(TargetcalError):
    """Pooled standard deviation is zero for a non-constant comparison."""


class AllZeroError(TargetcalError):
    """All weights are zero."""


class OutOfRangeError(TargetcalError):
    """A probability fell outside the open interval (0, 1)."""


class NotConvergedError(TargetcalError):
    """Solver hit its iteration limit, typically signalling an infeasible primal.

    Attributes:
        worst_constraint: index of the constraint with the largest relative
            violation at the last iterate, to aid overlap diagnosis.
    """

    def __init__(self, message: str, worst_constraint: int | None = None):
        super().__init__(message)
        self.worst_constraint = worst_constraint


class DegenerateOutcomeError(TargetcalError):
    """Outcome has zero range on the study sample (Y+ equals Y-)."""


class DegenerateDrawError(TargetcalError):
    """A simulated draw produced an empty sample or treatment arm."""


class DimensionMismatchError(TargetcalError):
    """Design column count does not match the fitted model."""


class SingularJacobianError(TargetcalError):
    """The stacked estimating-equation Jacobian is numerically singular."""


class MissingComponentsError(TargetcalError):
    """A variance computation is missing required nuisance components."""


class InvalidLevelError(TargetcalError):
    """Confidence level outside (0, 1)."""
