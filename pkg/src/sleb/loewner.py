"""Deterministic Loewner machinery on a sampled driving path.

Given a driving path (W, V) on a time grid, this module integrates the
boundary observables g_t(x) and g_t'(x) for real points x (midpoint rule
with adaptive sub-steps near the singularity), detects swallowing, converts
the conformal gap Q = (g - V)/g' into two-sided bounds on the geometric
distance from x to the curve, and reconstructs the curve itself by backward
composition of elementary vertical-slit maps.

Everything here is a pure function of the supplied path; randomness lives
entirely in :mod:`sleb.driving`.  The closed-form zero-driving solution
g_t(z) = sqrt(z^2 + 4t) is exposed as a reference for error measurement.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

from .driving import DrivingPath
from .errors import DegenerateGap, InvalidConfig, NonFiniteSample, PointLeftOfForcePoint

# A point whose image gets this close to the driving value is treated as
# absorbed: the true ODE reaches the singularity in finite time, and the
# integration would become arbitrarily stiff just below this scale.
SWALLOW_TOL = 1e-6

# Sub-step budget: each explicit midpoint sub-step moves g by at most
# ~OBS_CFL * |g - W| so the relative geometry changes slowly within a step.
OBS_CFL = 0.2


@dataclasses.dataclass
class ObservableTrajectory:
    """Dense boundary observables for a set of tracked real points.

    Arrays ``g``, ``g_prime`` and ``q`` have shape (n_times, n_points) and
    are frozen at their last pre-swallow values once a point is absorbed.
    ``swallow_time`` holds the first grid time at which |g - W| fell below
    ``SWALLOW_TOL`` (NaN where that never happened).
    """

    times: np.ndarray
    points: np.ndarray
    g: np.ndarray
    g_prime: np.ndarray
    q: np.ndarray
    swallow_time: np.ndarray
    kappa: float
    rho: float
    x_r: float


def track_observables(driving: DrivingPath, points) -> ObservableTrajectory:
    """Integrate g and g' along the driving path for each real point.

    dg = 2 dt / (g - W),  dg' = -2 g' dt / (g - W)^2, with W interpolated
    linearly inside each grid step and explicit-midpoint sub-steps sized by
    ``OBS_CFL``.  A point is marked swallowed at the first grid time where
    its gap |g - W| is below ``SWALLOW_TOL``; its rows are frozen from then
    on.  Raises ``NonFiniteSample`` if the integration blows up.
    """
    xs = np.asarray([float(x) for x in points], dtype=float)
    if xs.size == 0:
        raise InvalidConfig("track_observables needs at least one point")
    if np.any(~np.isfinite(xs)):
        raise InvalidConfig("tracked points must be finite")
    if np.any(xs < driving.x_r):
        bad = xs[xs < driving.x_r].min()
        raise PointLeftOfForcePoint(
            f"tracked point x={bad} lies left of the force point x_r={driving.x_r}"
        )
    times = np.asarray(driving.times, dtype=float)
    w = np.asarray(driving.w, dtype=float)
    v = np.asarray(driving.v, dtype=float)
    K = times.size - 1
    n = xs.size

    g = xs.astype(float).copy()
    gp = np.ones(n)
    alive = g - w[0] > SWALLOW_TOL
    out_g = np.empty((K + 1, n))
    out_gp = np.empty((K + 1, n))
    out_q = np.empty((K + 1, n))
    swallow = np.full(n, np.nan)
    swallow[~alive] = times[0]

    out_g[0] = g
    out_gp[0] = gp
    out_q[0] = (g - v[0]) / gp

    for k in range(K):
        h = times[k + 1] - times[k]
        w0, w1 = w[k], w[k + 1]
        slope = (w1 - w0) / h
        idx = np.nonzero(alive)[0]
        for i in idx:
            gi, gpi = g[i], gp[i]
            rem = h
            dead = False
            while rem > 0.0:
                tau = h - rem
                u = gi - (w0 + slope * tau)
                if u <= SWALLOW_TOL:
                    dead = True
                    break
                hs = min(rem, 0.5 * OBS_CFL * u * u / (1.0 + abs(slope) * u))
                g_mid = gi + hs / u
                u_mid = g_mid - (w0 + slope * (tau + 0.5 * hs))
                if u_mid <= SWALLOW_TOL:
                    dead = True
                    break
                gi = gi + 2.0 * hs / u_mid
                gpi = gpi * (1.0 - 2.0 * hs / (u_mid * u_mid))
                rem -= hs
            if not dead and gi - w1 <= SWALLOW_TOL:
                dead = True
            g[i], gp[i] = gi, gpi
            if dead:
                alive[i] = False
                swallow[i] = times[k + 1]
        out_g[k + 1] = g
        out_gp[k + 1] = gp
        out_q[k + 1] = np.where(alive, (g - v[k + 1]) / gp, out_q[k])
        # frozen rows keep the last pre-swallow values
        out_g[k + 1][~alive] = out_g[k][~alive]
        out_gp[k + 1][~alive] = out_gp[k][~alive]
        g[~alive] = out_g[k + 1][~alive]
        gp[~alive] = out_gp[k + 1][~alive]
    if not (np.isfinite(out_g).all() and np.isfinite(out_gp).all()):
        raise NonFiniteSample(
            "observable integration produced non-finite values; the grid "
            "step is too coarse for this driving path"
        )
    return ObservableTrajectory(
        times=times,
        points=xs,
        g=out_g,
        g_prime=out_gp,
        q=out_q,
        swallow_time=swallow,
        kappa=driving.kappa,
        rho=driving.rho,
        x_r=driving.x_r,
    )


@dataclasses.dataclass
class CurveTrace:
    """Discrete curve trace: one complex sample per grid time.

    ``points[0]`` is the curve's root 0; ``capacity`` is the half-plane
    capacity 2 * t_max of the final hull.
    """

    times: np.ndarray
    points: np.ndarray
    capacity: float

    @property
    def dt(self) -> float:
        return float(self.times[-1] / max(1, self.times.size - 1))


def _slit_sqrt(wsq: np.ndarray) -> np.ndarray:
    """Square root with the branch whose imaginary part is >= 0."""
    s = np.sqrt(wsq.astype(complex))
    return np.where(s.imag < 0.0, -s, s)


def reconstruct_trace(driving: DrivingPath) -> CurveTrace:
    """Approximate the curve by backward composition of vertical-slit maps.

    Step j is replaced by the exact map of a vertical slit of capacity
    h_j = t_j - t_{j-1} rooted at the step's driving value w_j; the trace
    sample at t_k is the image of w_k under the composed inverse maps of
    steps k, k-1, ..., 1.  Work is O(K^2) in the number of grid steps, with
    each stage vectorized across the still-open tips.
    """
    times = np.asarray(driving.times, dtype=float)
    w = np.asarray(driving.w, dtype=float)
    K = times.size - 1
    if K < 1:
        raise InvalidConfig("reconstruct_trace needs at least one step")
    h = np.diff(times)
    tips = w[1:].astype(complex)
    for j in range(K, 0, -1):
        c = w[j]
        zc = tips[j - 1 :] - c
        tips[j - 1 :] = c + _slit_sqrt(zc * zc - 4.0 * h[j - 1])
    if not np.isfinite(tips).all():
        raise NonFiniteSample("trace reconstruction produced non-finite points")
    pts = np.concatenate([[0.0 + 0.0j], tips])
    pts = pts.real + 1j * np.maximum(pts.imag, 0.0)
    return CurveTrace(times=times, points=pts, capacity=2.0 * float(times[-1]))


def forward_map(driving: DrivingPath, z) -> np.ndarray:
    """Composed forward Loewner map g_T(z) of the discretized hull.

    Applies the elementary vertical-slit maps step by step; far from the
    hull the result approaches the hydrodynamic normalization
    z + 2T/z + O(1/z^2).
    """
    times = np.asarray(driving.times, dtype=float)
    w = np.asarray(driving.w, dtype=float)
    h = np.diff(times)
    out = np.atleast_1d(np.asarray(z, dtype=complex)).copy()
    for j in range(1, times.size):
        c = w[j]
        zc = out - c
        out = c + _slit_sqrt(zc * zc + 4.0 * h[j - 1])
    if not np.isfinite(out).all():
        raise NonFiniteSample("forward map produced non-finite values")
    return out if np.ndim(z) else out[0]


def conformal_distance_bounds(q: float, x: float, x_r: float):
    """Two-sided bounds on dist(x, curve) from the conformal gap Q.

    The gap is comparable to the geometric distance:
    ((x - x_r)/4) * dist <= Q <= 4 * dist, so
    dist lies in [Q/4, 4Q/(x - x_r)].
    """
    if x <= x_r:
        raise DegenerateGap(f"x={x} must lie strictly right of x_r={x_r}")
    if not (q > 0.0 and math.isfinite(q)):
        raise InvalidConfig(f"conformal gap must be finite and > 0, got {q!r}")
    return q / 4.0, 4.0 * q / (x - x_r)


def distance_to_trace(x: float, trace: CurveTrace) -> float:
    """Geometric distance from the real point x to the trace samples.

    Plain minimum over sample points; no segment interpolation.  Trace
    density, not interpolation error, should set the accuracy, which is why
    sandwich checks carry an explicit slack factor.
    """
    return float(np.abs(trace.points - complex(x)).min())


def exact_slit_reference(t: float, x: float):
    """Closed-form observables for the zero driving function.

    With W == 0 (and the force point starting at 0) the solution is
    g_t(x) = sqrt(x^2 + 4t), g_t'(x) = x / sqrt(x^2 + 4t), V_t = 2 sqrt(t).
    Returns (g, g_prime, v).
    """
    r = math.sqrt(x * x + 4.0 * t)
    return r, x / r, 2.0 * math.sqrt(t)
