"""Pure-numpy compute kernels (fallback backend).

Two kernels drive everything:

* ``drive_epoch`` — exact-in-law transition of the squared force-point gap
  Z = (V - W)^2 / kappa (a squared Bessel process) plus trapezoid quadrature
  of dV = 2 dt / (V - W), filling per-step W and V paths for one epoch.
* ``track_epoch_pd`` — observable tracking in (p, g') coordinates with one
  rational step per grid step, falling back to a local excursion walk
  whenever a point pinches against the driving pair.

The tracking kernel exploits an exact identity: with p = g - V and
u = g - W, the ratio dynamics is dp / p = -dV / u, because
dp = 2 dt (1/u - 1/D) = -(p/u) (2 dt / D) = -(p/u) dV.  The driving kernel
already integrates V exactly in mean through the graded start and to
trapezoid accuracy elsewhere, so consuming its increments avoids
re-quadrating the singular rate 2/(u D) — no floor is needed and p stays
positive by construction (rational updates p -> p / (1 + dV/u)).  The
derivative g' follows d(g')/g' = -2 dt / u^2 via Cayley factors (1-a)/(1+a).

The excursion walk handles what a fixed grid cannot: once u = p + D drops
to a few multiples of one grid step's diffusive scale sqrt(kappa h), the
deep dips of the gap that decide both threshold crossings and swallowing
happen below grid resolution.  The walk leaves the shared path and evolves
the pair (p, D) by itself — the same exact squared-Bessel transition and
floored trapezoid as ``drive_epoch``, but with an adaptive local step
h_loc = c * max(z, z_p) tied to the current gap scale z = D^2/kappa and
pinch scale z_p = (0.03 p)^2 / kappa — until the point either escapes back
above the grid scale or its p collapses.  p -> 0 is the correct death
detector: ln p integrates -dV/u, which diverges exactly at swallowing.
Each walk window draws from its own counter-keyed stream (see
``rng.excursion_key``), so replay never depends on scheduling.  While a
point is in a walk its private gap temporarily replaces the shared one;
other points of the same replica keep the shared path (joint statistics
across simultaneously pinched points are approximate at sub-grid scale).

Crossings of Q = p / g' below each threshold are detected at grid-step ends
on the grid and at every local step inside a walk.  A dying point's final
evolved (p, g') state is checked against its remaining thresholds before it
is retired, so crossings that happen during the death plunge are kept.

The compiled backend in ``sleb._core`` reimplements these with identical
operation order (and a word-for-word identical Philox stream), so both
backends produce bit-identical results.  Keep any change here in lockstep
with the .pyx file.

Point status codes: 0 = active, 1 = swallowed, 2 = all thresholds crossed.
"""

from __future__ import annotations

import math

import numpy as np

from .rng import DRIVER_PT, ExcursionStream, excursion_key

# Excursion-walk control: entry/escape hysteresis in units of sqrt(kappa h),
# local step fraction, pinch-resolution fraction of p, and the p level that
# counts as swallowed.
WALK_ENTER = 4.0
WALK_ESCAPE = 8.0
WALK_STEP_FRAC = 0.02
WALK_PINCH_FRAC = 0.03
WALK_P_DEAD = 1e-14

# Driving-side dip refinement: a grid step that opens with Z <= DRIVE_SUB_Z*h
# (gap within WALK_ENTER * sqrt(kappa h), the same scale at which tracked
# points leave the grid) is advanced by DRIVE_SUB_M exact micro-transitions
# instead of one, with the V trapezoid accumulated at the micro scale.  The gap's law is unchanged (exact transitions compose); only
# the quadrature of dV = 2 dt / D sharpens.  Without this, the floored
# trapezoid systematically under-integrates dV across the gap's recurrent
# dips to zero (the gap is a Bessel process of dimension < 2), which inflates
# every tracked p at a rate that decays only like dt^(1/3).
DRIVE_SUB_Z = 16.0
DRIVE_SUB_M = 64


def _substep_gap(stream, z, h, kappa, gshape):
    """Advance the squared gap across one dip-flagged grid step by
    DRIVE_SUB_M exact micro-transitions; returns (z_end, dv)."""
    hm = h / DRIVE_SUB_M
    fl = 0.5 * math.sqrt(kappa * hm)
    d = math.sqrt(kappa * z)
    dv = 0.0
    for _ in range(DRIVE_SUB_M):
        g = stream.gamma(gshape)
        nm = stream.normal()
        t = nm + math.sqrt(z / hm)
        z = hm * (t * t + 2.0 * g)
        dn = math.sqrt(kappa * z)
        dv = dv + hm * (1.0 / (d if d > fl else fl) + 1.0 / (dn if dn > fl else fl))
        d = dn
    return z, dv


def drive_epoch(z, v, gam, nor, h, kappa, f_floor, w_path, v_path,
                gshape, seed, rep_glob, step0):
    """Advance the driving pair over one epoch of gam.shape[1] steps.

    z, v are (B,) state arrays updated in place; gam/nor are the epoch's
    (B, L) randomness blocks (gam ~ Gamma((d-1)/2), nor ~ N(0,1)); w_path and
    v_path are (B, L+1) outputs including the entry state in column 0.
    Dip-flagged steps consume a private side stream keyed by
    (seed, rep_glob[i], DRIVER_PT, step0 + j) and leave that step's column of
    gam/nor unused; rep_glob holds the rows' global replica indices.
    """
    L = gam.shape[1]
    d0 = np.sqrt(kappa * z)
    w_path[:, 0] = v - d0
    v_path[:, 0] = v
    z_flag = DRIVE_SUB_Z * h
    for j in range(L):
        sub = z <= z_flag
        s = np.sqrt(z / h)
        t = nor[:, j] + s
        z2 = h * (2.0 * gam[:, j] + t * t)
        d1 = np.sqrt(kappa * z2)
        r0 = 1.0 / np.maximum(d0, f_floor)
        r1 = 1.0 / np.maximum(d1, f_floor)
        dv = h * (r0 + r1)
        if sub.any():
            for i in np.nonzero(sub)[0]:
                i = int(i)
                stream = ExcursionStream(*excursion_key(
                    seed, int(rep_glob[i]), DRIVER_PT, step0 + j))
                zz, dvi = _substep_gap(stream, float(z[i]), h, kappa, gshape)
                z2[i] = zz
                d1[i] = math.sqrt(kappa * zz)
                dv[i] = dvi
        v += dv
        w_path[:, j + 1] = v - d1
        v_path[:, j + 1] = v
        z[:] = z2
        d0 = d1


def _record(mask, u, gp, p, t_end, thr_flat, thr_next, thr_end,
            cr_t, cr_u, cr_gp, cr_p, status):
    """Record threshold crossings Q <= thr (i.e. p <= thr * g') for lanes in
    ``mask`` at grid time t_end, walking each lane's descending threshold
    list.  Lanes that exhaust their list get status 2; returns that mask."""
    if thr_flat.shape[0]:
        guard = thr_flat.shape[0] - 1
        while True:
            can = mask & (thr_next < thr_end)
            if not can.any():
                break
            thr = thr_flat[np.minimum(thr_next, guard)]
            hit = can & (p <= thr * gp)
            if not hit.any():
                break
            slots = thr_next[hit]
            cr_t[slots] = t_end
            cr_u[slots] = u[hit]
            cr_gp[slots] = gp[hit]
            cr_p[slots] = p[hit]
            thr_next[hit] += 1
    done = mask & (thr_next >= thr_end)
    status[done] = 2
    return done


def _walk_window(
    stream, p0, gp0, d_in, h, t_base, kappa, gshape, lane,
    thr_flat, thr_next, thr_end, cr_t, cr_u, cr_gp, cr_p,
    allow_escape,
):
    """Run one excursion-walk window of local-time budget h for one lane.

    Returns (p, gp, d, outcome, t_event) with outcome 0 = still walking
    (budget exhausted, or escaped above the grid scale and idling until the
    shared gap unpinches too), 1 = died (p collapsed; t_event is the death
    time), 3 = crossed every threshold.  All crossings found along the way
    are recorded at continuous times.  With ``allow_escape`` false the walk
    never idles at the escape scale: it always burns its full budget (the
    local step grows with the gap, so a reopened lane costs one step per
    window).
    """
    p = p0
    gp = gp0
    d = d_in
    t_loc = 0.0
    esc_u = WALK_ESCAPE * math.sqrt(kappa * h)
    nxt = int(thr_next[lane])
    end = int(thr_end[lane])
    while t_loc < h and (allow_escape == 0 or p + d < esc_u):
        z = d * d / kappa
        tmp = WALK_PINCH_FRAC * p
        zref = tmp * tmp / kappa
        hl = WALK_STEP_FRAC * (z if z > zref else zref)
        if t_loc + hl > h:
            hl = h - t_loc
        if hl <= 1e-300:
            break
        g = stream.gamma(gshape)
        nrm = stream.normal()
        tt = nrm + math.sqrt(z / hl)
        zn = hl * (tt * tt + 2.0 * g)
        dn = math.sqrt(kappa * zn)
        fl = 0.5 * math.sqrt(kappa * hl)
        dv = hl * (1.0 / (d if d > fl else fl) + 1.0 / (dn if dn > fl else fl))
        u0 = p + d
        pm = p / (1.0 + 0.5 * dv / u0)
        um = pm + 0.5 * (d + dn)
        pn = p / (1.0 + dv / um)
        a = hl / (um * um)
        gp = gp * (1.0 - a) / (1.0 + a)
        p = pn
        d = dn
        t_loc = t_loc + hl
        while nxt < end and p <= thr_flat[nxt] * gp:
            cr_t[nxt] = t_base + t_loc
            cr_u[nxt] = p + d
            cr_gp[nxt] = gp
            cr_p[nxt] = p
            nxt += 1
        if nxt >= end:
            thr_next[lane] = nxt
            return p, gp, d, 3, t_base + t_loc
        if p <= WALK_P_DEAD:
            thr_next[lane] = nxt
            return p, gp, d, 1, t_base + t_loc
    thr_next[lane] = nxt
    return p, gp, d, 0, t_base + t_loc


def track_epoch_pd(
    p, gp, rep, w_path, v_path, h, t0,
    thr_flat, thr_next, thr_end,
    cr_t, cr_u, cr_gp, cr_p,
    status, swallow_t, snap_u, snap_gp, snap_p,
    kappa, gshape, seed, rep_glob, pt_idx, step0,
    in_walk, walk_d, allow_escape,
):
    """Track points through one epoch in (p, g') form.

    Each grid step applies the V-increment of the shared path through a
    rational midpoint update: a half step at the entry rate dV/u_0 positions
    u_mid, then p -> p / (1 + dV/u_mid).  Positivity is automatic.  A point
    whose u = p + D opens the step under WALK_ENTER * sqrt(kappa h) skips the
    grid update and runs an excursion-walk window over the same time slice
    instead (see module docstring); in_walk / walk_d persist the walk across
    steps and epochs.  A walking point rejoins the grid only once both its
    private u and the shared-path u stand above the escape scale — rejoining
    while the shared gap is still pinched would replay the same pinch against
    fresh randomness and bias every near-miss toward death.  With
    ``allow_escape`` 0 a walking point never rejoins at all: the splice from
    private back to shared gap is an O(1) relative jump in u at escape scale,
    which a stopped-state functional would feel, so single-point tasks keep
    the private gap for good.  rep_glob, pt_idx and step0 key each window's
    private stream.  Everything is updated in place.
    """
    n = p.shape[0]
    if n == 0:
        return
    L = w_path.shape[1] - 1
    enter_u = WALK_ENTER * math.sqrt(kappa * h)
    esc_u = WALK_ESCAPE * math.sqrt(kappa * h)
    act = status == 0
    for j in range(L):
        if not act.any():
            break
        t_end = t0 + (j + 1) * h
        d0 = v_path[rep, j] - w_path[rep, j]
        d1 = v_path[rep, j + 1] - w_path[rep, j + 1]
        dv = v_path[rep, j + 1] - v_path[rep, j]
        u_sh = p + d0
        if allow_escape != 0:
            rejoin = act & in_walk & (u_sh >= esc_u) & (p + walk_d >= esc_u)
            in_walk[rejoin] = False
        walk = act & (in_walk | (u_sh <= enter_u))
        ok = act & ~walk
        if ok.any():
            with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
                u0 = p + d0
                pm = p / (1.0 + 0.5 * dv / u0)
                um = pm + 0.5 * (d0 + d1)
                pn = p / (1.0 + dv / um)
                a = h / (um * um)
            gp[ok] = gp[ok] * (1.0 - a[ok]) / (1.0 + a[ok])
            p[ok] = pn[ok]
        if walk.any():
            gj = step0 + j
            t_base = t0 + j * h
            for lane in np.nonzero(walk)[0]:
                lane = int(lane)
                d_in = walk_d[lane] if in_walk[lane] else float(d0[lane])
                stream = ExcursionStream(*excursion_key(
                    seed, int(rep_glob[lane]), int(pt_idx[lane]), gj))
                pw, gpw, dw, outcome, t_ev = _walk_window(
                    stream, float(p[lane]), float(gp[lane]), d_in,
                    h, t_base, kappa, gshape, lane,
                    thr_flat, thr_next, thr_end, cr_t, cr_u, cr_gp, cr_p,
                    allow_escape)
                p[lane] = pw
                gp[lane] = gpw
                snap_u[lane] = pw + dw
                snap_gp[lane] = gpw
                snap_p[lane] = pw
                if outcome == 0:
                    in_walk[lane] = True
                    walk_d[lane] = dw
                else:
                    in_walk[lane] = False
                    if outcome == 1:
                        status[lane] = 1
                        swallow_t[lane] = t_ev
                        act[lane] = False
                    elif outcome == 3:
                        status[lane] = 2
                        act[lane] = False
        grid = act & ~walk
        if grid.any():
            u_end = p + d1
            snap_u[grid] = u_end[grid]
            snap_gp[grid] = gp[grid]
            snap_p[grid] = p[grid]
            done = _record(grid, u_end, gp, p, t_end,
                           thr_flat, thr_next, thr_end,
                           cr_t, cr_u, cr_gp, cr_p, status)
            act = act & ~done
