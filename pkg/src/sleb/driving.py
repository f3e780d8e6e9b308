"""Sampling of the driving pair (W, V) for chordal SLE_kappa(rho).

The single-force driving is sampled through the squared gap Z = (V - W)^2 /
kappa, which is a squared Bessel process of dimension 1 + 2(rho+2)/kappa and
has an exact one-step transition: given Z at time t and a step h,

    Z' = h * (2 G + (N + sqrt(Z/h))^2),   G ~ Gamma((d-1)/2),  N ~ N(0,1).

This is exact in law for every h, valid from Z = 0, and never goes negative.
V is recovered by trapezoid quadrature of dV = 2 dt / (V - W) with a
scale-aware floor on 1/(V-W), and W = V - sqrt(kappa Z).

When the force point starts at the tip (x_r = 0) the first uniform step is
refined on a graded microgrid t_j = h (j/m)^2, with the first sliver's V
increment taken as its closed-form mean; see ``graded_prepass``.

The two-force variant has no exact transition and is integrated by explicit
Euler with full truncation and recursive step halving near collisions.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from .errors import SingularityStall, StepTooCoarse
from .params import SleParams, validate_params
from .rng import CHUNK, chunk_generators, draw_epoch_blocks, draw_normal_blocks, replica_generator

# Microgrid refinement of the first step when the gap starts at zero.
GRADED_SUBSTEPS = 16

# Largest step size accepted by the samplers and the run engine.  The exact
# gap transition tolerates any h, but the V quadrature and the observable
# kernels assume the driving is well resolved within a step.
DT_CEILING = 0.1


def bessel_dimension(kappa: float, rho: float) -> float:
    """Dimension of the squared-gap Bessel process, 1 + 2(rho+2)/kappa."""
    return 1.0 + 2.0 * (rho + 2.0) / kappa


def gamma_shape(kappa: float, rho: float) -> float:
    """Shape (d-1)/2 = (rho+2)/kappa of the transition's Gamma increment."""
    return (rho + 2.0) / kappa


def dv_floor(kappa: float, h: float) -> float:
    """Scale-aware floor for 1/(V-W): half the r.m.s. gap grown over one step."""
    return 0.5 * math.sqrt(kappa * h)


def start_coefficient(kappa: float, rho: float) -> float:
    """Mean V-increment coefficient for the first sliver from a zero gap.

    With Z a squared Bessel of dimension d started at 0, Z(s) = s * G with
    G chi-square(d), so E[ integral_0^t 2 / sqrt(kappa Z(s)) ds ] =
    c * sqrt(t) with c = 2 sqrt(2) Gamma((d-1)/2) / (Gamma(d/2) sqrt(kappa)).
    """
    d = bessel_dimension(kappa, rho)
    return 2.0 * math.sqrt(2.0) * math.gamma((d - 1.0) / 2.0) / (
        math.gamma(d / 2.0) * math.sqrt(kappa)
    )


def check_dt(dt: float) -> None:
    if not (0.0 < dt <= DT_CEILING):
        raise StepTooCoarse(
            f"dt={dt!r} outside (0, {DT_CEILING}]; the V quadrature and the "
            "tracking kernels need the driving resolved within a step"
        )


@dataclasses.dataclass
class DrivingPath:
    """A sampled driving path on a (possibly non-uniform) time grid.

    ``times`` has one more entry than there are steps; ``w`` and ``v`` are
    samples of the driving function and the right force-point image at those
    times.  ``v_left`` is present only for two-force paths.
    """

    times: np.ndarray
    w: np.ndarray
    v: np.ndarray
    kappa: float
    rho: float
    x_r: float
    v_left: Optional[np.ndarray] = None
    rho_l: Optional[float] = None
    x_l: Optional[float] = None

    @property
    def gap(self) -> np.ndarray:
        """V - W at the grid times."""
        return self.v - self.w

    def __len__(self) -> int:
        return len(self.times)


def graded_prepass(z, v, gens, h, kappa, rho, w_out=None, v_out=None):
    """Advance (z, v) from a zero gap across [0, h] on a graded microgrid.

    z and v are (B,) arrays mutated in place; gens is the per-replica
    generator list.  Each replica consumes one Gamma block and one normal
    block of length GRADED_SUBSTEPS, in that order.  Returns
    (times, w_micro, v_micro) with shapes (m+1,), (B, m+1), (B, m+1); the
    optional w_out/v_out let callers supply the output buffers.
    """
    m = GRADED_SUBSTEPS
    B = z.shape[0]
    shape = gamma_shape(kappa, rho)
    gam, nor = draw_epoch_blocks(gens, range(B), shape, m)
    times = np.empty(m + 1)
    if w_out is None:
        w_out = np.empty((B, m + 1))
    if v_out is None:
        v_out = np.empty((B, m + 1))
    times[0] = 0.0
    d_prev = np.sqrt(kappa * z)
    w_out[:, 0] = v - d_prev
    v_out[:, 0] = v
    cs = start_coefficient(kappa, rho)
    t_prev = 0.0
    for j in range(1, m + 1):
        t_j = h * (j / m) ** 2
        dt = t_j - t_prev
        s = np.sqrt(z / dt)
        tt = nor[:, j - 1] + s
        z[:] = dt * (2.0 * gam[:, j - 1] + tt * tt)
        d_new = np.sqrt(kappa * z)
        if j == 1:
            v += cs * math.sqrt(t_j)
        else:
            f = dv_floor(kappa, dt)
            v += dt * (1.0 / np.maximum(d_prev, f) + 1.0 / np.maximum(d_new, f))
        times[j] = t_j
        w_out[:, j] = v - d_new
        v_out[:, j] = v
        d_prev = d_new
        t_prev = t_j
    return times, w_out, v_out


def sample_driving_path(
    params: SleParams, t_max: float, dt: float, seed: int = 0
) -> DrivingPath:
    """Sample one single-force driving path on a uniform grid of step dt.

    Uses the exact gap transition, so the law of (W, V) at the grid times is
    exact up to the V quadrature.  With x_r = 0 the first step is refined on
    the graded microgrid and those micro-times are kept in the returned path.
    The path reproduces replica 0 of a batch run with the same seed and the
    same pinned step.
    """
    if params.two_force:
        return sample_two_force_path(params, t_max, dt, seed)
    validate_params(params.kappa, params.rho, params.x_r)
    check_dt(dt)
    from .backend import drive_epoch

    n_steps = max(1, int(math.ceil(t_max / dt - 1e-12)))
    gens = [replica_generator(seed, 0)]
    kappa = params.kappa
    z = np.array([params.x_r * params.x_r / kappa])
    v = np.array([params.x_r])
    head_t = [np.array([0.0])]
    head_w = [np.array([[v[0] - math.sqrt(kappa * z[0])]])]
    head_v = [np.array([[v[0]]])]
    start = 0.0
    if params.x_r == 0.0:
        mt, mw, mv = graded_prepass(z, v, gens, dt, kappa, params.rho)
        head_t = [mt]
        head_w = [mw]
        head_v = [mv]
        start = dt
        n_steps -= 1
    shape = gamma_shape(kappa, params.rho)
    f = dv_floor(kappa, dt)
    step0 = 1 if params.x_r == 0.0 else 0  # prepass occupies step 0
    rep_ids = np.array([0], dtype=np.int64)
    done = 0
    while done < n_steps:
        L = min(2048, n_steps - done)
        gam, nor = draw_epoch_blocks(gens, [0], shape, L)
        w_path = np.empty((1, L + 1))
        v_path = np.empty((1, L + 1))
        drive_epoch(z, v, gam, nor, dt, kappa, f, w_path, v_path,
                    shape, seed, rep_ids, step0 + done)
        t0 = start + done * dt
        head_t.append(t0 + dt * np.arange(1, L + 1))
        head_w.append(w_path[:, 1:])
        head_v.append(v_path[:, 1:])
        done += L
    times = np.concatenate(head_t)
    w = np.concatenate([a[0] for a in head_w])
    vv = np.concatenate([a[0] for a in head_v])
    return DrivingPath(times, w, vv, kappa, params.rho, params.x_r)


def sample_terminal_gaps(
    params: SleParams, t_max: float, dt: float, n: int, seed: int = 0
) -> np.ndarray:
    """Sample n independent values of the gap D = V - W at time t_max.

    Batch helper used for moment checks: the exact transition gives
    E[D_T^2] = D_0^2 + (kappa + 2 rho + 4) T for every step size.
    """
    validate_params(params.kappa, params.rho, params.x_r)
    check_dt(dt)
    from .backend import drive_epoch

    kappa, rho, x_r = params.kappa, params.rho, params.x_r
    shape = gamma_shape(kappa, rho)
    f = dv_floor(kappa, dt)
    out = np.empty(n)
    filled = 0
    chunk = 0
    while filled < n:
        B = min(CHUNK, n - filled)
        gens = chunk_generators(seed, chunk, B)
        z = np.full(B, x_r * x_r / kappa)
        v = np.full(B, x_r)
        n_steps = max(1, int(math.ceil(t_max / dt - 1e-12)))
        step0 = 0
        if x_r == 0.0:
            graded_prepass(z, v, gens, dt, kappa, rho)
            n_steps -= 1
            step0 = 1
        rep_ids = np.arange(chunk * CHUNK, chunk * CHUNK + B, dtype=np.int64)
        done = 0
        while done < n_steps:
            L = min(2048, n_steps - done)
            gam, nor = draw_epoch_blocks(gens, range(B), shape, L)
            w_path = np.empty((B, L + 1))
            v_path = np.empty((B, L + 1))
            drive_epoch(z, v, gam, nor, dt, kappa, f, w_path, v_path,
                        shape, seed, rep_ids, step0 + done)
            done += L
        out[filled : filled + B] = np.sqrt(kappa * z)
        filled += B
        chunk += 1
    return out


_MAX_HALVING_DEPTH = 20


def _two_force_step(w, vl, vr, db, h, kappa, rho_r, rho_l, depth):
    """One full-truncation Euler step; recursive halving keeps the ordering
    V_L <= W <= V_R.  db is the Brownian increment for the whole substep and
    is split linearly on refinement."""
    f = dv_floor(kappa, h)
    dr = min(w - vr, -f)
    dl = max(w - vl, f)
    w_new = w + math.sqrt(kappa) * db + h * (rho_r / dr + rho_l / dl)
    vr_new = vr + 2.0 * h / max(vr - w, f)
    vl_new = vl + 2.0 * h / min(vl - w, -f)
    if vl_new <= w_new <= vr_new:
        return w_new, vl_new, vr_new
    if depth >= _MAX_HALVING_DEPTH:
        raise SingularityStall(
            f"two-force step kept violating V_L <= W <= V_R after "
            f"{_MAX_HALVING_DEPTH} halvings (h={h!r})"
        )
    w, vl, vr = _two_force_step(w, vl, vr, 0.5 * db, 0.5 * h, kappa, rho_r, rho_l, depth + 1)
    return _two_force_step(w, vl, vr, 0.5 * db, 0.5 * h, kappa, rho_r, rho_l, depth + 1)


def sample_two_force_path(
    params: SleParams, t_max: float, dt: float, seed: int = 0
) -> DrivingPath:
    """Sample one two-force driving path by full-truncation Euler.

    dW = sqrt(kappa) dB + rho dt/(W - V_R) + rho_l dt/(W - V_L), with both
    force-point images following dV = 2 dt / (V - W).  Steps that would break
    the ordering V_L <= W <= V_R are halved recursively (the Brownian
    increment is split linearly, so the path is a deterministic function of
    the per-step normal block); persistent violation raises SingularityStall.
    """
    validate_params(
        params.kappa, params.rho, params.x_r, rho_l=params.rho_l, x_l=params.x_l
    )
    if not params.two_force:
        raise ValueError("params has no left force point; use sample_driving_path")
    check_dt(dt)
    n_steps = max(1, int(math.ceil(t_max / dt - 1e-12)))
    gens = [replica_generator(seed, 0)]
    (nor,) = draw_normal_blocks(gens, [0], n_steps)
    sdt = math.sqrt(dt)
    kappa = params.kappa
    w, vl, vr = 0.0, float(params.x_l), float(params.x_r)
    times = dt * np.arange(n_steps + 1)
    w_arr = np.empty(n_steps + 1)
    vl_arr = np.empty(n_steps + 1)
    vr_arr = np.empty(n_steps + 1)
    w_arr[0], vl_arr[0], vr_arr[0] = w, vl, vr
    for k in range(n_steps):
        db = sdt * nor[k]
        w, vl, vr = _two_force_step(
            w, vl, vr, db, dt, kappa, params.rho, params.rho_l, 0
        )
        w_arr[k + 1], vl_arr[k + 1], vr_arr[k + 1] = w, vl, vr
    return DrivingPath(
        times, w_arr, vr_arr, kappa, params.rho, params.x_r,
        v_left=vl_arr, rho_l=params.rho_l, x_l=params.x_l,
    )
