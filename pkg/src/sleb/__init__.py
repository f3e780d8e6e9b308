"""sleb: Monte Carlo tools for chordal SLE_kappa(rho) boundary behaviour."""

__version__ = "0.1.0"

from .params import (  # noqa: F401
    Regime,
    SleParams,
    DerivedExponents,
    classify_regime,
    derived_exponents,
    validate_params,
)
from .errors import SlebError, SlebValidationError, SlebRuntimeError  # noqa: F401
