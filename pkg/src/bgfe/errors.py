"""Exception types shared across the package."""


class BgfeError(Exception):
    """Base class for all package-specific errors."""


class PanelFormatError(BgfeError, ValueError):
    """Malformed panel input."""


class MissingCellError(PanelFormatError):
    """A (unit, period) cell required for a balanced panel is absent."""

    def __init__(self, unit, period=None):
        self.unit = unit
        self.period = period
        if period is None:
            msg = f"panel is unbalanced: unit {unit!r} is missing periods"
        else:
            msg = f"panel is unbalanced: unit {unit!r} is missing period {period!r}"
        super().__init__(msg)


class DuplicateCellError(PanelFormatError):
    def __init__(self, unit, period):
        self.unit = unit
        self.period = period
        super().__init__(f"duplicate observation for unit {unit!r}, period {period!r}")


class NonNumericError(PanelFormatError):
    def __init__(self, column, value):
        super().__init__(f"non-numeric value {value!r} in column {column!r}")


class HorizonTooLargeError(BgfeError, ValueError):
    """Requested holdout horizon leaves fewer than two training periods."""


class AccuracyOutOfRangeError(BgfeError, ValueError):
    """Constraint accuracy outside [0.5, 1)."""


class UnknownUnitError(BgfeError, KeyError):
    """A constraint or pre-grouping file references a unit not in the panel."""


class EmptyChainError(BgfeError, ValueError):
    """An operation requires at least one stored posterior draw."""


class LengthMismatchError(BgfeError, ValueError):
    """Two partitions do not cover the same number of units."""


class DimensionMismatchError(BgfeError, ValueError):
    """Covariate array shape incompatible with the fitted model."""


class SingularPrecisionError(BgfeError, ValueError):
    """Posterior precision matrix failed its Cholesky factorization."""


class AllZeroMassError(BgfeError, RuntimeError):
    """Every candidate group received zero mass in a partition update.

    Unreachable when the slice-sampler invariants hold; raised as an
    internal consistency failure rather than a user error.
    """


class CollinearDesignError(BgfeError, ValueError):
    """Rank-deficient regression design."""
