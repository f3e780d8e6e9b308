"""Parameters and derived exponents for chordal SLE_kappa(rho).

The driving pair is (W, V): W the driving function, V the image of the force
point x_r >= 0.  A second force point (rho_l, x_l <= 0) is optional.  All
boundary-proximity exponents below are functions of (kappa, rho) only:

    alpha      = (rho + 2) * (rho + 4 - kappa/2) / kappa
    beta       = (8 + 2*rho - kappa) / kappa
    alpha_tilde = alpha(kappa, rho + 2)
    beta_tilde = (12 + 2*rho - kappa) / kappa
    bessel_dim = 1 + 2*(rho + 2) / kappa

The curve touches (0, infinity) iff rho < kappa/2 - 2, which is also exactly
bessel_dim < 2 and alpha < 1.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional

from .errors import (
    ForcePointNegative,
    KappaNonpositive,
    RhoBelowExistence,
    RhoOutsideExponentRange,
)


class Regime(str, enum.Enum):
    BOUNDARY_TOUCHING = "BoundaryTouching"
    CRITICAL = "Critical"
    NON_TOUCHING = "NonTouching"


@dataclass(frozen=True)
class SleParams:
    """Validated parameter set for one process."""

    kappa: float
    rho: float
    x_r: float = 0.0
    rho_l: Optional[float] = None
    x_l: Optional[float] = None

    @property
    def two_force(self) -> bool:
        return self.rho_l is not None


@dataclass(frozen=True)
class DerivedExponents:
    alpha: float
    beta: float
    alpha_tilde: float
    beta_tilde: float
    bessel_dim: float
    regime: Regime


def validate_params(
    kappa=None,
    rho=None,
    x_r: float = 0.0,
    rho_l: Optional[float] = None,
    x_l: Optional[float] = None,
    *,
    for_exponents: bool = False,
) -> SleParams:
    """Check parameters and return a frozen SleParams.

    Accepts either keyword arguments or a single mapping.  With
    ``for_exponents=True`` the stricter gate rho > max(kappa/2 - 4, -2) is
    enforced (required by every exponent-based operation); bare simulation
    only needs rho > -2.
    """
    if isinstance(kappa, Mapping):
        raw = dict(kappa)
        kappa = raw.pop("kappa")
        rho = raw.pop("rho")
        x_r = raw.pop("x_r", 0.0)
        rho_l = raw.pop("rho_l", None)
        x_l = raw.pop("x_l", None)
        if raw:
            raise TypeError(f"unknown parameter keys: {sorted(raw)}")
    kappa = float(kappa)
    rho = float(rho)
    x_r = float(x_r)

    if not kappa > 0.0:
        raise KappaNonpositive(f"kappa must be positive, got {kappa}")
    if not rho > -2.0:
        raise RhoBelowExistence(f"rho must exceed -2, got {rho}")
    if x_r < 0.0:
        raise ForcePointNegative(f"x_r must be >= 0, got {x_r}")
    if for_exponents and not rho > max(kappa / 2.0 - 4.0, -2.0):
        raise RhoOutsideExponentRange(
            f"exponents need rho > max(kappa/2 - 4, -2) = "
            f"{max(kappa / 2.0 - 4.0, -2.0)}, got rho = {rho}"
        )
    if rho_l is not None:
        rho_l = float(rho_l)
        if x_l is None:
            raise ForcePointNegative("x_l is required when rho_l is given")
        x_l = float(x_l)
        if not rho_l > -2.0:
            raise RhoBelowExistence(f"rho_l must exceed -2, got {rho_l}")
        if x_l > 0.0:
            raise ForcePointNegative(f"x_l must be <= 0, got {x_l}")
    elif x_l is not None:
        raise ForcePointNegative("rho_l is required when x_l is given")
    return SleParams(kappa=kappa, rho=rho, x_r=x_r, rho_l=rho_l, x_l=x_l)


def classify_regime(kappa: float, rho: float) -> Regime:
    crit = kappa / 2.0 - 2.0
    if rho < crit:
        return Regime.BOUNDARY_TOUCHING
    if rho == crit:
        return Regime.CRITICAL
    return Regime.NON_TOUCHING


def derived_exponents(params, rho=None) -> DerivedExponents:
    """Exponents and regime for (kappa, rho).

    Accepts an SleParams or ``derived_exponents(kappa, rho)``.  Raises
    RhoOutsideExponentRange unless rho > max(kappa/2 - 4, -2).
    """
    if isinstance(params, SleParams):
        kappa, r = params.kappa, params.rho
    else:
        kappa, r = float(params), float(rho)
    validate_params(kappa, r, for_exponents=True)
    alpha = (r + 2.0) * (r + 4.0 - kappa / 2.0) / kappa
    beta = (8.0 + 2.0 * r - kappa) / kappa
    alpha_tilde = (r + 4.0) * (r + 6.0 - kappa / 2.0) / kappa
    beta_tilde = (12.0 + 2.0 * r - kappa) / kappa
    bessel_dim = 1.0 + 2.0 * (r + 2.0) / kappa
    return DerivedExponents(
        alpha=alpha,
        beta=beta,
        alpha_tilde=alpha_tilde,
        beta_tilde=beta_tilde,
        bessel_dim=bessel_dim,
        regime=classify_regime(kappa, r),
    )
