"""Exception types raised across the package."""


class SemivcamError(Exception):
    """Base class for all package errors."""


class SchemaError(SemivcamError):
    """A required column is missing or the schema mapping is inconsistent."""


class ParseError(SemivcamError):
    """A data cell could not be parsed; carries the offending row number."""


class EmptyDataError(SemivcamError):
    """The input contains no observations."""


class KnotPlacementError(SemivcamError):
    """Too few distinct values to place the requested interior knots."""


class DomainError(SemivcamError):
    """Evaluation point outside the basis boundary beyond slack."""


class SingularFitError(SemivcamError):
    """A local fit has fewer effective observations than design columns."""

    def __init__(self, msg, target=None):
        super().__init__(msg)
        self.target = target


class PilotSingularError(SemivcamError):
    """Pilot spline design is rank deficient beyond its structural overlap."""

    def __init__(self, msg, nullity=None):
        super().__init__(msg)
        self.nullity = nullity


class SelectionError(SemivcamError):
    """Every candidate in a model-selection grid failed."""


class FitError(SemivcamError):
    """Too many per-target failures while building component curves."""


class ExtrapolationError(SemivcamError):
    """Prediction was requested outside the tabulated grids."""


class BoundaryDensityError(SemivcamError):
    """Plug-in density at the evaluation point is numerically zero."""


class PairsUnavailableError(SemivcamError):
    """All subjects have a single observation; within-subject pair
    statistics (covariance surface, dense variance terms) cannot be
    estimated.  Only the sparse-variant intervals apply."""


class DegenerateStatisticError(SemivcamError):
    """All cross-subject pair weights vanished; larger test bandwidths
    are required."""
