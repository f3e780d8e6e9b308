"""Exception hierarchy for sleb.

Two families: validation errors (bad parameters or configuration, CLI exit
code 2) and runtime failures (numerical or statistical trouble during a run,
CLI exit code 3).
"""


class SlebError(Exception):
    """Base class for all sleb errors."""


class SlebValidationError(SlebError):
    """Invalid parameters or configuration; refused before any run starts."""


class SlebRuntimeError(SlebError):
    """Failure while running: numerics, quadrature, statistics, or I/O."""


# --- parameter validation -------------------------------------------------

class KappaNonpositive(SlebValidationError):
    pass


class RhoBelowExistence(SlebValidationError):
    """rho <= -2: the driving SDE has no solution."""


class RhoOutsideExponentRange(SlebValidationError):
    """rho <= kappa/2 - 4: exponent-based operations are not defined."""


class ForcePointNegative(SlebValidationError):
    pass


class InvalidConfig(SlebValidationError):
    """Generic bad run configuration (counts, windows, grids)."""


# --- driving generators ---------------------------------------------------

class StepTooCoarse(SlebValidationError):
    pass


class NonFiniteSample(SlebRuntimeError):
    pass


class SingularityStall(SlebRuntimeError):
    """Two-force substepping exceeded its depth limit near a collision."""


# --- Loewner machinery ----------------------------------------------------

class NonFinite(SlebRuntimeError):
    pass


class PointLeftOfForcePoint(SlebValidationError):
    pass


class DegenerateGap(SlebValidationError):
    pass


# --- estimators -----------------------------------------------------------

class PointNotTracked(SlebValidationError):
    pass


class InsufficientHits(SlebRuntimeError):
    """Fewer than two thresholds collected enough hits to fit a slope."""


class ConditionCohortEmpty(SlebRuntimeError):
    pass


class DomainOrderViolated(SlebValidationError):
    pass


# --- dimension ------------------------------------------------------------

class RegimeMismatch(SlebValidationError):
    pass


class InsufficientScales(SlebRuntimeError):
    pass


# --- graph proximity ------------------------------------------------------

class QuadratureFailure(SlebRuntimeError):
    pass


class GridTooCoarse(SlebValidationError):
    pass


# --- harness --------------------------------------------------------------

class IoFailure(SlebRuntimeError):
    pass


class DegenerateAbscissae(SlebValidationError):
    pass
