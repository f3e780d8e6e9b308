"""Batch engine: many replicas, many tracked boundary points, one pass.

A *task* fixes the process parameters, an epoch schedule, a time cap, a
replica count and seed, and a list of tracked points, each with a descending
list of raw thresholds on the conformal gap Q(t, x) = (g_t(x) - V_t) / g_t'(x).
The engine advances replicas in chunks of ``rng.CHUNK``:

* the driving pair is advanced by the exact gap transition (kernel
  ``drive_epoch``), one epoch of randomness at a time;
* every tracked point evolves p = g - V off the driving path's V-increments
  (dp/p = -dV/u exactly) and g' off u, one rational (p, g') step per grid
  step, and records the first time its Q falls below each threshold; points
  that pinch below a few grid-scale units of u leave the grid for a local
  excursion walk (same transition law, adaptive local steps, private
  counter-keyed randomness) until they either escape or are swallowed;
* an optional escape certificate retires points whose remaining hit
  probability is provably below ``resid_frac`` times its time-zero bound.

Replica fates are a function of (seed, replica index, config) only: blocks
of randomness are drawn whole for every alive replica each epoch, so results
are independent of chunking, worker count, and scheduling.

Point status codes: 0 = still running at the cap (censored), 1 = swallowed
before crossing everything (a definitive miss for the remaining thresholds),
2 = crossed all thresholds, 3 = retired by the escape certificate.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np

from . import backend
from .driving import (
    bessel_dimension,
    check_dt,
    dv_floor,
    gamma_shape,
    graded_prepass,
)
from .errors import (
    DegenerateGap,
    InvalidConfig,
    NonFiniteSample,
    PointLeftOfForcePoint,
)
from .params import SleParams, derived_exponents, validate_params
from .rng import CHUNK, MAX_POINTS, MAX_STEPS, chunk_generators, draw_epoch_blocks


@dataclasses.dataclass(frozen=True)
class EpochSchedule:
    """Deterministic step-size schedule.

    With kdiv = 0 the step is pinned at dt_base.  With kdiv > 0 the step at
    elapsed time t is max(dt_base, t / kdiv) — a uniform warm phase followed
    by steps growing in proportion to t, which matches the self-similar
    slowdown of the dynamics (relative rates decay like 1/t)."""

    dt_base: float
    epoch_len: int = 2048
    kdiv: int = 0

    def __post_init__(self):
        check_dt(self.dt_base)
        if self.epoch_len < 1:
            raise InvalidConfig("epoch_len must be >= 1")
        if self.kdiv < 0:
            raise InvalidConfig("kdiv must be >= 0")

    def step_at(self, t: float) -> float:
        if self.kdiv == 0:
            return self.dt_base
        return max(self.dt_base, t / self.kdiv)

    def epochs(self, t_start: float, t_cap: float):
        """Yield (t0, h, L): epochs of L steps of size h starting at t0.

        The last epoch is truncated, closing with one partial step so the
        grid lands exactly on t_cap."""
        t = t_start
        while True:
            gap = t_cap - t
            h = self.step_at(t)
            if gap <= 1e-9 * h:
                return
            if gap >= h:
                L = min(self.epoch_len, int(gap / h + 1e-9))
                yield t, h, L
                t = t + L * h
            else:
                yield t, gap, 1
                return


@dataclasses.dataclass(frozen=True)
class PointSpec:
    """One tracked boundary point with its descending threshold list.

    Thresholds are raw values of the conformal gap Q; a point "crosses" a
    threshold at the first grid time with Q <= threshold.  They must be
    strictly positive and non-increasing."""

    x: float
    thresholds: tuple

    def __post_init__(self):
        thr = tuple(float(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", thr)
        if not thr:
            raise InvalidConfig(f"point x={self.x}: empty threshold list")
        if any(t <= 0.0 or not math.isfinite(t) for t in thr):
            raise InvalidConfig(f"point x={self.x}: thresholds must be finite and > 0")
        if any(a < b for a, b in zip(thr, thr[1:])):
            raise InvalidConfig(f"point x={self.x}: thresholds must be non-increasing")


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    """Complete description of one batch run."""

    params: SleParams
    schedule: EpochSchedule
    t_cap: float
    n_replicas: int
    base_seed: int
    points: tuple
    resid_frac: float = 0.0
    stop_on_first_cross: bool = False
    record_epochs: bool = False
    # Whether a lane that entered a close-approach walk may hand back to the
    # shared driving once the gap reopens.  Rejoining keeps the points of a
    # replica coupled to one Brownian realisation (wanted for joint
    # multi-point statistics) at the price of a state splice at escape
    # scale.  With rejoin off the lane keeps its private gap for good --
    # the walk pair is the exact conditional law, so single-point
    # functionals of the stopped state stay unbiased.
    walk_rejoin: bool = True

    def __post_init__(self):
        p = self.params
        validate_params(p.kappa, p.rho, p.x_r, rho_l=p.rho_l, x_l=p.x_l)
        if p.two_force:
            raise InvalidConfig(
                "batch runs support single-force processes only; two-force "
                "driving is available through the path sampler"
            )
        if self.t_cap <= 0.0:
            raise InvalidConfig("t_cap must be > 0")
        if self.n_replicas < 1:
            raise InvalidConfig("n_replicas must be >= 1")
        pts = tuple(self.points)
        object.__setattr__(self, "points", pts)
        if not pts:
            raise InvalidConfig("at least one tracked point is required")
        for pt in pts:
            if pt.x < p.x_r:
                raise PointLeftOfForcePoint(
                    f"tracked point x={pt.x} lies left of the force point x_r={p.x_r}"
                )
            if pt.x == p.x_r:
                raise DegenerateGap(
                    f"tracked point x={pt.x} coincides with the force point"
                )
        if self.resid_frac < 0.0:
            raise InvalidConfig("resid_frac must be >= 0")
        if self.resid_frac > 0.0:
            # the certificate needs the one-point exponents
            validate_params(p.kappa, p.rho, p.x_r, for_exponents=True)
        if len(pts) > MAX_POINTS - 1:
            raise InvalidConfig(
                f"at most {MAX_POINTS - 1} tracked points per replica (the "
                "top stream slot belongs to the driving kernel)"
            )
        if self.n_replicas > 0xFFFFFFFF:
            raise InvalidConfig("replica count exceeds the stream key budget")
        n_steps = sum(L for _, _, L in self.schedule.epochs(0.0, self.t_cap)) + 1
        if n_steps > MAX_STEPS:
            raise InvalidConfig(
                f"schedule takes {n_steps} grid steps, above the stream key "
                f"budget of {MAX_STEPS}; raise dt_base or use kdiv grading"
            )

    @property
    def n_chunks(self) -> int:
        return (self.n_replicas + CHUNK - 1) // CHUNK


@dataclasses.dataclass(frozen=True)
class HorizonPolicy:
    """How an open-ended first-passage run is brought to an end.

    ``t_cap`` is the hard capacity-time cap; ``resid_frac`` feeds the escape
    certificate (``TaskSpec.resid_frac``), retiring replicas once their
    remaining passage probability is provably negligible.  Whatever tail
    mass is left at retirement or at the cap is never added to an estimate:
    the per-replica scale-invariance bounds are summed and reported as a
    one-sided widening of the upper confidence limits.
    """

    t_cap: float = 32.0
    resid_frac: float = 1e-2

    def __post_init__(self):
        if not (self.t_cap > 0.0 and math.isfinite(self.t_cap)):
            raise InvalidConfig("t_cap must be finite and > 0")
        if self.resid_frac < 0.0:
            raise InvalidConfig("resid_frac must be >= 0")


@dataclasses.dataclass
class ChunkResult:
    """Dense per-replica outcome of one chunk.

    Threshold-indexed arrays have shape (n, T) where T is the total threshold
    count per replica; ``offsets`` maps point k to columns
    offsets[k]:offsets[k+1].  Point-indexed arrays have shape (n, n_points).
    Crossing entries are NaN where the threshold was never crossed."""

    chunk_index: int
    n: int
    offsets: np.ndarray
    cross_t: np.ndarray
    cross_u: np.ndarray
    cross_gp: np.ndarray
    cross_p: np.ndarray
    status: np.ndarray
    swallow_t: np.ndarray
    cert_t: np.ndarray
    snap_u: np.ndarray
    snap_gp: np.ndarray
    snap_p: np.ndarray
    residual: np.ndarray
    epoch_times: Optional[np.ndarray] = None
    epoch_u: Optional[np.ndarray] = None
    epoch_gp: Optional[np.ndarray] = None
    epoch_p: Optional[np.ndarray] = None


def run_chunk(task: TaskSpec, chunk_index: int) -> ChunkResult:
    """Run one chunk of replicas to the cap and collect every event."""
    p = task.params
    kappa, rho, x_r = p.kappa, p.rho, p.x_r
    n_pts = len(task.points)
    xs = np.array([pt.x for pt in task.points])
    start = chunk_index * CHUNK
    B = min(CHUNK, task.n_replicas - start)
    if B <= 0:
        raise InvalidConfig(f"chunk {chunk_index} is out of range")
    gens = chunk_generators(task.base_seed, chunk_index, B)
    shape = gamma_shape(kappa, rho)

    lens = np.array([len(pt.thresholds) for pt in task.points])
    off = np.concatenate([[0], np.cumsum(lens)]).astype(np.int64)
    T = int(off[-1])
    thr_rep = np.concatenate([pt.thresholds for pt in task.points])
    thr_flat = np.tile(thr_rep, B)

    n_lanes = B * n_pts
    lane_rep = np.repeat(np.arange(B, dtype=np.int64), n_pts)
    lane_pt = np.tile(np.arange(n_pts), B)
    thr_start0 = (lane_rep * T + off[lane_pt]).astype(np.int64)
    thr_next = thr_start0.copy()
    thr_end = (lane_rep * T + off[lane_pt + 1]).astype(np.int64)

    # point state: p = g - V and g'; the gap D rides on the shared path except
    # inside an excursion walk, where walk_d carries the lane's private copy
    p_state = np.tile(xs - x_r, B)
    gp = np.ones(n_lanes)
    in_walk = np.zeros(n_lanes, dtype=bool)
    walk_d = np.zeros(n_lanes)
    lane_rep_glob = (start + lane_rep).astype(np.int64)
    lane_pt_idx = lane_pt.astype(np.int64)
    status = np.zeros(n_lanes, dtype=np.int8)
    swallow_t = np.full(n_lanes, np.nan)
    cert_t = np.full(n_lanes, np.nan)
    snap_u = np.tile(xs, B)
    snap_gp = np.ones(n_lanes)
    snap_p = np.tile(xs - x_r, B)
    residual = np.zeros(n_lanes)
    cr_t = np.full(B * T, np.nan)
    cr_u = np.full(B * T, np.nan)
    cr_gp = np.full(B * T, np.nan)
    cr_p = np.full(B * T, np.nan)

    z = np.full(B, x_r * x_r / kappa)
    v = np.full(B, float(x_r))

    if task.resid_frac > 0.0:
        exps = derived_exponents(p)
        alpha, beta = exps.alpha, exps.beta
        m_stop = task.resid_frac * (xs - x_r) ** (beta - alpha) * xs ** (-beta)
        m_stop_lane = np.tile(m_stop, B)

    def run_kernel(t0, h, w_path, v_path, rep_local, li, step0):
        ps = p_state[li].copy()
        gg = gp[li].copy()
        tn = thr_next[li].copy()
        te = thr_end[li].copy()
        stt = status[li].copy()
        sw = swallow_t[li].copy()
        su = snap_u[li].copy()
        sg = snap_gp[li].copy()
        sp = snap_p[li].copy()
        iw = in_walk[li].copy()
        wd = walk_d[li].copy()
        backend.track_epoch_pd(
            ps, gg, rep_local, w_path, v_path, h, t0,
            thr_flat, tn, te, cr_t, cr_u, cr_gp, cr_p,
            stt, sw, su, sg, sp,
            kappa, shape, task.base_seed,
            lane_rep_glob[li], lane_pt_idx[li], step0,
            iw, wd, 1 if task.walk_rejoin else 0,
        )
        p_state[li] = ps
        gp[li] = gg
        thr_next[li] = tn
        status[li] = stt
        swallow_t[li] = sw
        snap_u[li] = su
        snap_gp[li] = sg
        snap_p[li] = sp
        in_walk[li] = iw
        walk_d[li] = wd

    t_start = 0.0
    step_base = 0
    h0 = task.schedule.step_at(0.0)
    if x_r == 0.0:
        # refine the first step on a graded microgrid, then give the tracked
        # points one standard update across [0, h0]
        _, w_micro, v_micro = graded_prepass(z, v, gens, h0, kappa, rho)
        w2 = np.empty((B, 2))
        v2 = np.empty((B, 2))
        w2[:, 0] = 0.0
        v2[:, 0] = 0.0
        w2[:, 1] = w_micro[:, -1]
        v2[:, 1] = v_micro[:, -1]
        li = np.arange(n_lanes)
        run_kernel(0.0, h0, w2, v2, lane_rep.copy(), li, 0)
        t_start = h0
        step_base = 1

    alive_rep = np.ones(B, dtype=bool)
    epoch_times = [] if task.record_epochs else None
    epoch_u = [] if task.record_epochs else None
    epoch_gp = [] if task.record_epochs else None
    epoch_p = [] if task.record_epochs else None

    for t0, h, L in task.schedule.epochs(t_start, task.t_cap):
        alive_idx = np.nonzero(alive_rep)[0]
        if alive_idx.size == 0:
            break
        gam, nor = draw_epoch_blocks(gens, alive_idx, shape, L)
        za = z[alive_idx].copy()
        va = v[alive_idx].copy()
        n_alive = alive_idx.size
        w_path = np.empty((n_alive, L + 1))
        v_path = np.empty((n_alive, L + 1))
        backend.drive_epoch(
            za, va, gam, nor, h, kappa, dv_floor(kappa, h), w_path, v_path,
            shape, task.base_seed, start + alive_idx, step_base,
        )
        z[alive_idx] = za
        v[alive_idx] = va
        if not (np.isfinite(za).all() and np.isfinite(va).all()):
            raise NonFiniteSample(
                f"driving state became non-finite in chunk {chunk_index} "
                f"near t={t0 + L * h:g}"
            )

        lm = (status == 0) & alive_rep[lane_rep]
        li = np.nonzero(lm)[0]
        if li.size:
            rep_local = np.searchsorted(alive_idx, lane_rep[li]).astype(np.int64)
            run_kernel(t0, h, w_path, v_path, rep_local, li, step_base)
        step_base += L

        t_end = t0 + L * h
        if task.resid_frac > 0.0:
            am = (status == 0) & alive_rep[lane_rep]
            ai = np.nonzero(am)[0]
            if ai.size:
                pu = snap_u[ai]
                pg = snap_gp[ai]
                pp = snap_p[ai]
                q = pp / pg
                with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                    m_val = q ** (-alpha) * (pp / pu) ** beta
                stopm = m_val <= m_stop_lane[ai]
                if stopm.any():
                    sel = ai[stopm]
                    status[sel] = 3
                    cert_t[sel] = t_end
                    nxt = thr_flat[thr_next[sel]]
                    residual[sel] = np.clip((nxt / q[stopm]) ** alpha, 0.0, 1.0)

        if task.record_epochs:
            epoch_times.append(t_end)
            epoch_u.append(snap_u.reshape(B, n_pts).copy())
            epoch_gp.append(snap_gp.reshape(B, n_pts).copy())
            epoch_p.append(snap_p.reshape(B, n_pts).copy())

        lane_done = (status != 0).reshape(B, n_pts)
        rep_done = lane_done.all(axis=1)
        if task.stop_on_first_cross:
            rep_hit = (thr_next > thr_start0).reshape(B, n_pts).any(axis=1)
            rep_done = rep_done | rep_hit
        alive_rep &= ~rep_done

    # censored-at-cap residuals
    if task.resid_frac > 0.0:
        ci = np.nonzero(status == 0)[0]
        if ci.size:
            pp = snap_p[ci]
            q = pp / snap_gp[ci]
            nxt = thr_flat[thr_next[ci]]
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                residual[ci] = np.clip((nxt / q) ** alpha, 0.0, 1.0)

    def pt_shape(a):
        return a.reshape(B, n_pts)

    return ChunkResult(
        chunk_index=chunk_index,
        n=B,
        offsets=off,
        cross_t=cr_t.reshape(B, T),
        cross_u=cr_u.reshape(B, T),
        cross_gp=cr_gp.reshape(B, T),
        cross_p=cr_p.reshape(B, T),
        status=pt_shape(status),
        swallow_t=pt_shape(swallow_t),
        cert_t=pt_shape(cert_t),
        snap_u=pt_shape(snap_u),
        snap_gp=pt_shape(snap_gp),
        snap_p=pt_shape(snap_p),
        residual=pt_shape(residual),
        epoch_times=np.array(epoch_times) if task.record_epochs else None,
        epoch_u=np.stack(epoch_u) if task.record_epochs and epoch_u else None,
        epoch_gp=np.stack(epoch_gp) if task.record_epochs and epoch_gp else None,
        epoch_p=np.stack(epoch_p) if task.record_epochs and epoch_p else None,
    )
