"""Monte Carlo estimators for boundary-proximity probabilities.

All "the curve comes within eps of x" events are operationalized through the
conformal first passage: the first time the gap Q(t, x) = (g - V)/g' drops
below eps * (x - x_r).  The gap is comparable to the geometric distance by
two-sided constants, which shift fitted intercepts but never slopes; the
geometric comparison itself is exercised by the trace sandwich checks in
:mod:`sleb.loewner`.

Estimators run on the batch engine and aggregate per-chunk counts, so every
estimate is deterministic in (seed, replica index) and independent of worker
count.  Horizon truncation is accounted for, never hidden: undecided
replicas contribute a per-replica scale-invariance tail bound, and those
bounds widen the upper confidence limits one-sidedly.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional

import numpy as np

from . import backend
from .engine import EpochSchedule, HorizonPolicy, PointSpec, TaskSpec
from .errors import (
    ConditionCohortEmpty,
    DomainOrderViolated,
    InsufficientHits,
    InvalidConfig,
    PointNotTracked,
)
from .harness import map_chunks, wilson_ci
from .params import SleParams, derived_exponents, validate_params

# Default step grading for open-horizon passage runs: a uniform warm phase of
# ~kdiv steps, then steps growing like t/kdiv.  The dynamics is self-similar
# (all rates scale like 1/t), so this keeps the resolved excursion scale a
# fixed fraction of the running spatial scale instead of wasting the step
# budget on late, slow epochs.
DEFAULT_KDIV = 2000

# A threshold row enters the slope fit only with at least this many hits.
MIN_FIT_HITS = 10

_STOP_REASONS = ("QFloor", "Swallowed", "Horizon")


# ---------------------------------------------------------------------------
# result containers


@dataclasses.dataclass(frozen=True)
class FirstPassage:
    """First passage of the conformal gap below one threshold.

    ``passage_time`` is None when the passage never happened within the
    observed horizon; ``censored`` marks the undecided case (horizon reached
    with the point still alive), and ``residual_bound`` then carries the
    scale-invariance tail bound (eps*(x-x_r)/Q_end)^alpha, clipped to [0,1].
    Decided misses (point swallowed first) are not censored and carry a zero
    bound.
    """

    threshold_eps: float
    passage_time: Optional[float]
    censored: bool
    residual_bound: float

    def __post_init__(self):
        if self.censored and self.passage_time is not None:
            raise InvalidConfig("censored first passage cannot carry a time")
        if not 0.0 <= self.residual_bound <= 1.0:
            raise InvalidConfig("residual_bound must lie in [0, 1]")


@dataclasses.dataclass(frozen=True)
class ThresholdRow:
    """One threshold's aggregated outcome."""

    eps: float
    hits: int
    n: int
    p_hat: float
    ci_low: float
    ci_high: float
    censor_rate: float
    fit_used: bool


@dataclasses.dataclass(frozen=True)
class FitResult:
    slope: float
    intercept: float
    slope_stderr: float


@dataclasses.dataclass
class EstimateReport:
    """Rows, fit, and context for one estimation run.

    ``csv_rows``/``summary`` feed :func:`sleb.harness.emit_report`; the JSON
    summary always exposes ``alpha_theory`` (the exponent the fitted slope
    should approach) alongside the full derived-exponent table.
    """

    label: str
    params: SleParams
    rows: list
    fitted: Optional[FitResult]
    theory: dict
    seed_info: dict
    extras: dict = dataclasses.field(default_factory=dict)

    def csv_rows(self):
        return [
            {
                "eps": r.eps,
                "hits": r.hits,
                "n": r.n,
                "p_hat": r.p_hat,
                "ci_low": r.ci_low,
                "ci_high": r.ci_high,
                "censor_rate": r.censor_rate,
            }
            for r in self.rows
        ]

    def summary(self):
        out = {
            "task": self.label,
            "params": {
                "kappa": self.params.kappa,
                "rho": self.params.rho,
                "x_r": self.params.x_r,
            },
            "slope": self.fitted.slope if self.fitted else None,
            "slope_stderr": self.fitted.slope_stderr if self.fitted else None,
            "intercept": self.fitted.intercept if self.fitted else None,
            "alpha_theory": self.theory["alpha_theory"],
            "theory": self.theory,
            "seed_info": self.seed_info,
            "extras": self.extras,
        }
        return out


@dataclasses.dataclass(frozen=True)
class MartingaleState:
    """The hitting martingale M = (g'/(g-V))^alpha ((g-V)/(g-W))^beta at a
    stopped time.

    Before the point is swallowed M is strictly positive and bounded by
    q^{-alpha} (the second factor is <= 1 because g - V <= g - W); at the
    swallowing limit it vanishes.
    """

    x: float
    t: float
    m_value: float
    stopped: bool
    stop_reason: Optional[str] = None

    def __post_init__(self):
        if self.stopped and self.stop_reason not in _STOP_REASONS:
            raise InvalidConfig(
                f"stop_reason must be one of {_STOP_REASONS}, got {self.stop_reason!r}"
            )
        if not self.stopped and self.stop_reason is not None:
            raise InvalidConfig("running state cannot carry a stop_reason")
        if self.m_value < 0.0:
            raise InvalidConfig("m_value must be >= 0")


# ---------------------------------------------------------------------------
# helpers


def _as_params(params, *, for_exponents: bool) -> SleParams:
    if isinstance(params, SleParams):
        return validate_params(
            params.kappa,
            params.rho,
            params.x_r,
            rho_l=params.rho_l,
            x_l=params.x_l,
            for_exponents=for_exponents,
        )
    return validate_params(params, for_exponents=for_exponents)


def _theory(exps, primary: str) -> dict:
    return {
        "alpha": exps.alpha,
        "beta": exps.beta,
        "alpha_tilde": exps.alpha_tilde,
        "beta_tilde": exps.beta_tilde,
        "regime": exps.regime.value,
        "alpha_theory": getattr(exps, primary),
        "exponent_name": primary,
    }


def _seed_info(seed: int, n: int) -> dict:
    return {
        "base_seed": int(seed),
        "n_replicas": int(n),
        "scheme": "counter-keyed streams per (seed, replica, point, step)",
    }


def _sorted_eps(eps_list) -> list:
    eps = sorted({float(e) for e in eps_list}, reverse=True)
    if not eps:
        raise InvalidConfig("eps_list must not be empty")
    if any(not (e > 0.0 and math.isfinite(e)) for e in eps):
        raise InvalidConfig("thresholds must be finite and > 0")
    return eps


def _binomial_slope(eps, hits, n_eff) -> FitResult:
    """Unweighted LS slope of log p-hat on log eps, stderr by binomial deltas.

    Var(log p-hat) ~= (1 - p-hat)/hits per row (delta method), propagated
    through the least-squares weights.
    """
    le = np.log(np.asarray(eps, dtype=float))
    ph = np.asarray(hits, dtype=float) / np.asarray(n_eff, dtype=float)
    lp = np.log(ph)
    xb = le.mean()
    sxx = ((le - xb) ** 2).sum()
    slope = ((le - xb) * (lp - lp.mean())).sum() / sxx
    intercept = lp.mean() - slope * xb
    coeff = (le - xb) / sxx
    var_lp = (1.0 - ph) / np.asarray(hits, dtype=float)
    var_slope = (coeff ** 2 * var_lp).sum()
    return FitResult(
        slope=float(slope),
        intercept=float(intercept),
        slope_stderr=float(math.sqrt(var_slope)),
    )


def _fit_rows(rows, n_fittable: int) -> Optional[FitResult]:
    """Fit the flagged rows; None when too few rows were ever fittable.

    ``n_fittable`` counts the thresholds that could have entered the fit by
    construction (e.g. sub-unit ones).  When at least two such rows were
    requested but hits came back too thin, that is a run failure and raises
    InsufficientHits; when the request itself had fewer than two, there is
    simply nothing to fit.
    """
    used = [r for r in rows if r.fit_used]
    if len(used) < 2:
        if n_fittable < 2:
            return None
        raise InsufficientHits(
            f"only {len(used)} thresholds reached {MIN_FIT_HITS} hits; "
            "a slope fit needs at least two"
        )
    return _binomial_slope(
        [r.eps for r in used], [r.hits for r in used], [r.n for r in used]
    )


def _m_at(gp, p, u, alpha, beta):
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        return (gp / p) ** alpha * (p / u) ** beta


# ---------------------------------------------------------------------------
# chunk folds (module level so process pools can pickle them by reference)


def _fold_one_point(res, thr, alpha, beta, want_m):
    crossed = ~np.isnan(res.cross_t)
    hits = crossed.sum(axis=0).astype(np.int64)
    st = res.status[:, 0]
    und = (st == 0) | (st == 3)
    censor = (und[:, None] & ~crossed).sum(axis=0).astype(np.int64)
    resid = np.zeros(thr.size)
    if und.any():
        q = res.snap_p[und, 0] / res.snap_gp[und, 0]
        miss = ~crossed[und]
        for k in range(thr.size):
            qk = q[miss[:, k]]
            resid[k] = np.minimum((thr[k] / qk) ** alpha, 1.0).sum()
    mstats = None
    if want_m:
        m = np.zeros(res.n)
        full = st == 2
        m[full] = _m_at(
            res.cross_gp[full, -1], res.cross_p[full, -1], res.cross_u[full, -1],
            alpha, beta,
        )
        m[und] = _m_at(
            res.snap_gp[und, 0], res.snap_p[und, 0], res.snap_u[und, 0],
            alpha, beta,
        )
        mh = np.array([m[crossed[:, k]].sum() for k in range(thr.size)])
        mstats = (float(m.sum()), float((m * m).sum()), mh)
    return hits, resid, censor, res.n, mstats


def _fold_two_point(res, thr0, thrd, alpha, ordered):
    c0 = ~np.isnan(res.cross_t[:, 0])
    cd = ~np.isnan(res.cross_t[:, 1:])
    joint = c0[:, None] & cd
    if ordered:
        with np.errstate(invalid="ignore"):
            joint &= res.cross_t[:, 1:] < res.cross_t[:, [0]]
    st0, st1 = res.status[:, 0], res.status[:, 1]
    u0 = (st0 == 0) | (st0 == 3)
    u1 = (st1 == 0) | (st1 == 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        q0 = res.snap_p[:, 0] / res.snap_gp[:, 0]
        q1 = res.snap_p[:, 1] / res.snap_gp[:, 1]
    b0 = np.where(c0, 1.0, np.where(u0, np.minimum((thr0 / q0) ** alpha, 1.0), 0.0))
    bd = np.where(
        cd, 1.0, np.where(u1[:, None], np.minimum((thrd / q1[:, None]) ** alpha, 1.0), 0.0)
    )
    bound = np.minimum(b0[:, None], bd)
    open_k = ~joint & (bound > 0.0)
    return (
        joint.sum(axis=0).astype(np.int64),
        np.where(~joint, bound, 0.0).sum(axis=0),
        open_k.sum(axis=0).astype(np.int64),
        int(c0.sum()),
        cd.sum(axis=0).astype(np.int64),
        res.n,
    )


def _fold_conditional(res, thr, alpha):
    c0 = ~np.isnan(res.cross_t[:, 0])
    cond = np.zeros(res.n, dtype=bool)
    if c0.any():
        u_t = res.cross_u[c0, 0]
        p_t = res.cross_p[c0, 0]
        cond[c0] = (u_t - p_t) <= p_t
    ok = c0 & cond
    fail = c0 & ~cond
    ck = ~np.isnan(res.cross_t[:, 1:])
    st = res.status[:, 0]
    und = (st == 0) | (st == 3)
    hits_ok = (ok[:, None] & ck).sum(axis=0).astype(np.int64)
    hits_fail = (fail[:, None] & ck).sum(axis=0).astype(np.int64)
    censor = (ok[:, None] & und[:, None] & ~ck).sum(axis=0).astype(np.int64)
    resid = np.zeros(thr.size)
    sel = ok & und
    if sel.any():
        q = res.snap_p[sel, 0] / res.snap_gp[sel, 0]
        miss = ~ck[sel]
        for k in range(thr.size):
            qk = q[miss[:, k]]
            resid[k] = np.minimum((thr[k] / qk) ** alpha, 1.0).sum()
    hits_un = ck.sum(axis=0).astype(np.int64)
    return hits_ok, hits_fail, censor, resid, int(ok.sum()), int(fail.sum()), hits_un, res.n


def _fold_martingale(res, alpha, beta):
    st = res.status[:, 0]
    crossed = ~np.isnan(res.cross_t[:, 0])
    m = np.zeros(res.n)
    m[crossed] = _m_at(
        res.cross_gp[crossed, 0], res.cross_p[crossed, 0], res.cross_u[crossed, 0],
        alpha, beta,
    )
    capped = st == 0
    m[capped] = _m_at(
        res.snap_gp[capped, 0], res.snap_p[capped, 0], res.snap_u[capped, 0],
        alpha, beta,
    )
    # swallowed-before-floor lanes: the second factor vanishes in the limit
    n_floor = int(crossed.sum())
    n_swallow = int(((st == 1) & ~crossed).sum())
    n_horizon = int(capped.sum())
    return float(m.sum()), float((m * m).sum()), n_floor, n_swallow, n_horizon, res.n


# ---------------------------------------------------------------------------
# first passage on a dense observable trajectory


def first_passage_sigma(traj, x: float, eps: float) -> FirstPassage:
    """First grid time with Q(t, x) <= eps * (x - x_r) on a dense trajectory.

    For undecided trajectories (horizon reached, point never swallowed) the
    result is censored and carries the tail bound (threshold / Q_end)^alpha.
    """
    if not eps > 0.0:
        raise InvalidConfig(f"eps must be > 0, got {eps}")
    cols = np.nonzero(traj.points == float(x))[0]
    if cols.size == 0:
        raise PointNotTracked(f"x={x} is not among the tracked points {traj.points}")
    j = int(cols[0])
    thr = eps * (float(x) - traj.x_r)
    q = traj.q[:, j]
    swallow = traj.swallow_time[j]
    if math.isfinite(swallow):
        live = traj.times < swallow
    else:
        live = np.ones(q.shape, dtype=bool)
    hit = np.nonzero(live & (q <= thr))[0]
    if hit.size:
        return FirstPassage(
            threshold_eps=float(eps),
            passage_time=float(traj.times[hit[0]]),
            censored=False,
            residual_bound=0.0,
        )
    if math.isfinite(swallow):
        return FirstPassage(float(eps), None, False, 0.0)
    alpha = derived_exponents(traj.kappa, traj.rho).alpha
    bound = min(1.0, (thr / float(q[-1])) ** alpha)
    return FirstPassage(float(eps), None, True, bound)


# ---------------------------------------------------------------------------
# batch estimators


def estimate_one_point(
    params,
    eps_list,
    n: int,
    seed: int,
    horizon: Optional[HorizonPolicy] = None,
    *,
    x: float = 1.0,
    dt: float = 1e-4,
    kdiv: int = DEFAULT_KDIV,
    workers: int = 1,
    martingale_cv: bool = False,
) -> EstimateReport:
    """Estimate P[curve comes eps-close to x] across a coupled ladder.

    All thresholds are evaluated on shared paths, so the per-eps hit sets are
    nested exactly.  Thresholds with eps >= 1 pass at time zero (the initial
    gap is x - x_r) and never touch the engine.  ``martingale_cv``
    additionally reports an experimental control-variate adjustment of each
    row using the hitting martingale at the replica's stopped state; the
    headline rows are always the plain frequencies.
    """
    p = _as_params(params, for_exponents=True)
    exps = derived_exponents(p)
    hz = horizon if horizon is not None else HorizonPolicy()
    eps = _sorted_eps(eps_list)
    scale = float(x) - p.x_r
    run_eps = [e for e in eps if e < 1.0]

    hits = {e: n for e in eps if e >= 1.0}
    resid = {e: 0.0 for e in eps}
    censor = {e: 0 for e in eps}
    m_sum = m_sq = 0.0
    m_hit = {}
    if run_eps:
        thr = np.array([e * scale for e in run_eps])
        task = TaskSpec(
            params=p,
            schedule=EpochSchedule(dt_base=dt, kdiv=kdiv),
            t_cap=hz.t_cap,
            n_replicas=n,
            base_seed=seed,
            points=(PointSpec(x=float(x), thresholds=tuple(thr)),),
            resid_frac=hz.resid_frac,
        )
        folds = map_chunks(
            task, _fold_one_point, (thr, exps.alpha, exps.beta, martingale_cv), workers
        )
        for h, r, c, _, ms in folds:
            for k, e in enumerate(run_eps):
                hits[e] = hits.get(e, 0) + int(h[k])
                resid[e] += float(r[k])
                censor[e] += int(c[k])
            if ms is not None:
                m_sum += ms[0]
                m_sq += ms[1]
                for k, e in enumerate(run_eps):
                    m_hit[e] = m_hit.get(e, 0.0) + float(ms[2][k])

    rows = []
    for e in eps:
        h = hits.get(e, 0)
        lo, hi = wilson_ci(h, n)
        rows.append(
            ThresholdRow(
                eps=e,
                hits=h,
                n=n,
                p_hat=h / n,
                ci_low=lo,
                ci_high=min(1.0, hi + resid[e] / n),
                censor_rate=censor[e] / n,
                fit_used=h >= MIN_FIT_HITS,
            )
        )
    fitted = _fit_rows(rows, len(run_eps))

    extras = {
        "x": float(x),
        "backend": backend.BACKEND,
        "dt": dt,
        "kdiv": kdiv,
        "t_cap": hz.t_cap,
        "resid_frac": hz.resid_frac,
    }
    if martingale_cv:
        m0 = scale ** (exps.beta - exps.alpha) * float(x) ** (-exps.beta)
        m_bar = m_sum / n
        var_m = max(0.0, m_sq / n - m_bar * m_bar)
        cv_rows = []
        for e in eps:
            ph = hits.get(e, 0) / n
            # a time-zero passage has indicator 1 on every path, so its
            # covariance with the stopped martingale is exactly zero
            mh = m_hit.get(e, m_sum if e >= 1.0 else 0.0)
            cov = mh / n - m_bar * ph
            c_star = cov / var_m if var_m > 0.0 else 0.0
            cv_rows.append({"eps": e, "p_cv": ph - c_star * (m_bar - m0)})
        extras["martingale_cv"] = {"m_bar": m_bar, "m0": m0, "rows": cv_rows}

    return EstimateReport(
        label="one-point",
        params=p,
        rows=rows,
        fitted=fitted,
        theory=_theory(exps, "alpha"),
        seed_info=_seed_info(seed, n),
        extras=extras,
    )


def _two_point_impl(
    params, eps, deltas, x, n, seed, horizon, dt, kdiv, workers, ordered
) -> EstimateReport:
    p = _as_params(params, for_exponents=True)
    exps = derived_exponents(p)
    hz = horizon if horizon is not None else HorizonPolicy()
    if not (float(x) > 0.0 and math.isfinite(float(x))):
        raise InvalidConfig(f"point separation x must be finite and > 0, got {x}")
    eps = float(eps)
    if not 0.0 < eps < 1.0:
        raise InvalidConfig(f"eps must lie in (0, 1), got {eps}")
    dl = _sorted_eps(np.atleast_1d(np.asarray(deltas, dtype=float)).tolist())
    if any(d >= 1.0 for d in dl):
        raise InvalidConfig("delta thresholds must lie in (0, 1)")
    x0, x1 = 1.0, 1.0 + float(x)
    thr0 = eps * (x0 - p.x_r)
    thrd = np.array([d * (x1 - p.x_r) for d in dl])
    task = TaskSpec(
        params=p,
        schedule=EpochSchedule(dt_base=dt, kdiv=kdiv),
        t_cap=hz.t_cap,
        n_replicas=n,
        base_seed=seed,
        points=(
            PointSpec(x=x0, thresholds=(thr0,)),
            PointSpec(x=x1, thresholds=tuple(thrd)),
        ),
        resid_frac=hz.resid_frac,
    )
    folds = map_chunks(
        task, _fold_two_point, (thr0, thrd, exps.alpha, ordered), workers
    )
    nd = len(dl)
    joint = np.zeros(nd, dtype=np.int64)
    resid = np.zeros(nd)
    censor = np.zeros(nd, dtype=np.int64)
    marg0 = 0
    margd = np.zeros(nd, dtype=np.int64)
    for j, r, c, m0c, mdc, _ in folds:
        joint += j
        resid += r
        censor += c
        marg0 += m0c
        margd += mdc

    rows = []
    for k, d in enumerate(dl):
        h = int(joint[k])
        lo, hi = wilson_ci(h, n)
        rows.append(
            ThresholdRow(
                eps=d,
                hits=h,
                n=n,
                p_hat=h / n,
                ci_low=lo,
                ci_high=min(1.0, hi + float(resid[k]) / n),
                censor_rate=int(censor[k]) / n,
                fit_used=h >= MIN_FIT_HITS,
            )
        )
    fitted = _fit_rows(rows, len(dl))

    lo0, hi0 = wilson_ci(marg0, n)
    extras = {
        "eps": eps,
        "x": float(x),
        "points": [x0, x1],
        "ordered": ordered,
        "marginal_eps": {"eps": eps, "hits": marg0, "p_hat": marg0 / n,
                         "ci_low": lo0, "ci_high": hi0},
        "marginal_delta_hits": [int(v) for v in margd],
        "joint_hits": [int(v) for v in joint],
        "backend": backend.BACKEND,
        "dt": dt,
        "kdiv": kdiv,
        "t_cap": hz.t_cap,
        "resid_frac": hz.resid_frac,
    }
    name = "alpha_tilde" if ordered else "alpha"
    return EstimateReport(
        label="ordered-two-point" if ordered else "two-point",
        params=p,
        rows=rows,
        fitted=fitted,
        theory=_theory(exps, name),
        seed_info=_seed_info(seed, n),
        extras=extras,
    )


def estimate_two_point(
    params,
    eps,
    delta,
    x,
    n: int,
    seed: int,
    horizon: Optional[HorizonPolicy] = None,
    *,
    dt: float = 1e-4,
    kdiv: int = DEFAULT_KDIV,
    workers: int = 1,
) -> EstimateReport:
    """Joint passage frequency at the two points 1 and 1 + x.

    ``delta`` may be a single threshold or a sweep; the row abscissa is the
    delta at the far point with eps fixed at the near one.  Joint hits are
    counted on shared paths, so joint <= each marginal exactly; the marginal
    counts ride along in ``extras``.
    """
    return _two_point_impl(
        params, eps, delta, x, n, seed, horizon, dt, kdiv, workers, ordered=False
    )


def estimate_ordered_two_point(
    params,
    eps,
    delta,
    x,
    n: int,
    seed: int,
    horizon: Optional[HorizonPolicy] = None,
    *,
    dt: float = 1e-4,
    kdiv: int = DEFAULT_KDIV,
    workers: int = 1,
) -> EstimateReport:
    """Probability that the far passage strictly precedes the near one.

    Counts replicas where the delta-passage at 1 + x happens strictly before
    the eps-passage at 1 (both within the horizon); the delta-slope is
    compared against alpha_tilde = alpha(kappa, rho + 2) instead of alpha.
    Ordered hits are a subset of the unordered joint hits by construction.
    """
    return _two_point_impl(
        params, eps, delta, x, n, seed, horizon, dt, kdiv, workers, ordered=True
    )


def estimate_conditional_one_point(
    params,
    eps_list,
    n: int,
    seed: int,
    stop_rule: float = 0.25,
    horizon: Optional[HorizonPolicy] = None,
    *,
    dt: float = 1e-4,
    kdiv: int = DEFAULT_KDIV,
    workers: int = 1,
) -> EstimateReport:
    """Passage probabilities conditioned on the state at a stopping time.

    The stopping time is the first time Q(t, 1) <= stop_rule (a gap-threshold
    rule).  Replicas that reach it split by the exact configuration test
    V - W <= g(1) - V there: the satisfying cohort carries the two-sided
    conditional estimate (rows below), while the failing cohort is reported
    in ``extras`` as an upper-bound-only check.  All eps must be <= the stop
    threshold; rows at equality pass trivially.
    """
    p = _as_params(params, for_exponents=True)
    exps = derived_exponents(p)
    hz = horizon if horizon is not None else HorizonPolicy()
    r0 = float(stop_rule)
    if not 0.0 < r0 < 1.0:
        raise InvalidConfig(f"stop_rule threshold must lie in (0, 1), got {r0}")
    eps = _sorted_eps(eps_list)
    if any(e > r0 for e in eps):
        raise InvalidConfig(f"conditional thresholds must be <= stop_rule={r0}")
    scale = 1.0 - p.x_r
    if scale <= 0.0:
        raise InvalidConfig("conditional estimator tracks x=1; needs x_r < 1")
    deep = [e for e in eps if e < r0]
    thr = np.array([e * scale for e in deep])
    task = TaskSpec(
        params=p,
        schedule=EpochSchedule(dt_base=dt, kdiv=kdiv),
        t_cap=hz.t_cap,
        n_replicas=n,
        base_seed=seed,
        points=(PointSpec(x=1.0, thresholds=(r0 * scale, *thr)),),
        resid_frac=hz.resid_frac,
    )
    folds = map_chunks(task, _fold_conditional, (thr, exps.alpha), workers)
    nk = len(deep)
    hits_ok = np.zeros(nk, dtype=np.int64)
    hits_fail = np.zeros(nk, dtype=np.int64)
    censor = np.zeros(nk, dtype=np.int64)
    resid = np.zeros(nk)
    hits_un = np.zeros(nk, dtype=np.int64)
    n_ok = n_fail = 0
    for ho, hf, c, r, a, f, hu, _ in folds:
        hits_ok += ho
        hits_fail += hf
        censor += c
        resid += r
        n_ok += a
        n_fail += f
        hits_un += hu
    if n_ok == 0:
        raise ConditionCohortEmpty(
            f"no replica reached Q <= {r0} with V - W <= g - V; "
            "raise n or loosen the stop rule"
        )

    def cohort_rows(counts, cohort_n, with_resid):
        out = []
        for e in eps:
            if e == r0:
                h = cohort_n
                rk = 0.0
                ck = 0
            else:
                k = deep.index(e)
                h = int(counts[k])
                rk = float(resid[k]) if with_resid else 0.0
                ck = int(censor[k]) if with_resid else 0
            lo, hi = wilson_ci(h, max(cohort_n, 1))
            out.append(
                ThresholdRow(
                    eps=e,
                    hits=h,
                    n=cohort_n,
                    p_hat=h / cohort_n if cohort_n else 0.0,
                    ci_low=lo,
                    ci_high=min(1.0, hi + (rk / cohort_n if cohort_n else 0.0)),
                    censor_rate=(ck / cohort_n) if cohort_n else 0.0,
                    fit_used=e < r0 and h >= MIN_FIT_HITS,
                )
            )
        return out

    rows = cohort_rows(hits_ok, n_ok, True)
    fitted = _fit_rows(rows, len(deep))
    fail_rows = cohort_rows(hits_fail, n_fail, False) if n_fail else []
    extras = {
        "stop_rule_q": r0,
        "cohort_n": n_ok,
        "fail_cohort_n": n_fail,
        "fail_cohort_rows": [dataclasses.asdict(r) for r in fail_rows],
        "unconditional_hits": [int(v) for v in hits_un],
        "backend": backend.BACKEND,
        "dt": dt,
        "kdiv": kdiv,
        "t_cap": hz.t_cap,
        "resid_frac": hz.resid_frac,
    }
    return EstimateReport(
        label="conditional-one-point",
        params=p,
        rows=rows,
        fitted=fitted,
        theory=_theory(exps, "alpha"),
        seed_info=_seed_info(seed, n),
        extras=extras,
    )


# ---------------------------------------------------------------------------
# the hitting martingale


def martingale_value(g: float, g_prime: float, v: float, w: float, params) -> float:
    """Evaluate M = (g'/(g - V))^alpha ((g - V)/(g - W))^beta exactly."""
    p = _as_params(params, for_exponents=True)
    exps = derived_exponents(p)
    if not (g > v >= w):
        raise DomainOrderViolated(f"need g > v >= w, got g={g}, v={v}, w={w}")
    if not g_prime > 0.0:
        raise DomainOrderViolated(f"need g' > 0, got {g_prime}")
    return (g_prime / (g - v)) ** exps.alpha * ((g - v) / (g - w)) ** exps.beta


def martingale_start(params, x: float) -> float:
    """M at time zero for the identity map: (x - x_r)^(beta-alpha) x^(-beta)."""
    p = _as_params(params, for_exponents=True)
    exps = derived_exponents(p)
    return (float(x) - p.x_r) ** (exps.beta - exps.alpha) * float(x) ** (-exps.beta)


def martingale_test(
    params,
    x: float,
    t_max: float,
    q_floor: float,
    n: int,
    seed: int,
    *,
    dt: float = 1e-3,
    workers: int = 1,
) -> "MartingaleReport":
    """Optional-stopping check: E[M at the stopped time] should equal M_0.

    Each replica stops at min(t_max, first Q <= q_floor, swallowing); the
    floor keeps M bounded by ~q_floor^(-alpha) so the stopped mean must match
    the start value within Monte Carlo error.  Swallowed replicas contribute
    the limit value 0.  Pass/fail is judged at three standard errors.
    """
    p = _as_params(params, for_exponents=True)
    exps = derived_exponents(p)
    if not q_floor > 0.0:
        raise InvalidConfig(f"q_floor must be > 0, got {q_floor}")
    if t_max < 0.0:
        raise InvalidConfig(f"t_max must be >= 0, got {t_max}")
    if n < 1:
        raise InvalidConfig("n must be >= 1")
    m0 = martingale_start(p, x)
    if t_max == 0.0:
        return MartingaleReport(
            params=p, x=float(x), t_max=0.0, q_floor=q_floor, n=n,
            m0=m0, m_hat=m0, stderr=0.0, passed=True,
            reasons={"QFloor": 0, "Swallowed": 0, "Horizon": n},
            seed_info=_seed_info(seed, n),
            extras={"backend": backend.BACKEND, "dt": dt},
        )
    task = TaskSpec(
        params=p,
        schedule=EpochSchedule(dt_base=dt, kdiv=0),
        t_cap=float(t_max),
        n_replicas=n,
        base_seed=seed,
        points=(PointSpec(x=float(x), thresholds=(float(q_floor),)),),
        # single tracked point: keep close approaches on their private gap
        # so the stopped state is never spliced back onto the shared path
        walk_rejoin=False,
    )
    folds = map_chunks(task, _fold_martingale, (exps.alpha, exps.beta), workers)
    s = s2 = 0.0
    n_floor = n_swallow = n_horizon = 0
    for a, b, f, sw, hz_, _ in folds:
        s += a
        s2 += b
        n_floor += f
        n_swallow += sw
        n_horizon += hz_
    m_hat = s / n
    var = max(0.0, (s2 - n * m_hat * m_hat) / max(n - 1, 1))
    stderr = math.sqrt(var / n)
    return MartingaleReport(
        params=p, x=float(x), t_max=float(t_max), q_floor=float(q_floor), n=n,
        m0=m0, m_hat=m_hat, stderr=stderr,
        passed=abs(m_hat - m0) <= 3.0 * stderr,
        reasons={"QFloor": n_floor, "Swallowed": n_swallow, "Horizon": n_horizon},
        seed_info=_seed_info(seed, n),
        extras={"backend": backend.BACKEND, "dt": dt},
    )


@dataclasses.dataclass
class MartingaleReport:
    """Aggregated optional-stopping check for the hitting martingale."""

    params: SleParams
    x: float
    t_max: float
    q_floor: float
    n: int
    m0: float
    m_hat: float
    stderr: float
    passed: bool
    reasons: dict
    seed_info: dict
    extras: dict = dataclasses.field(default_factory=dict)

    def csv_rows(self):
        return [
            {
                "stop_reason": reason,
                "count": self.reasons.get(reason, 0),
                "fraction": self.reasons.get(reason, 0) / self.n,
            }
            for reason in _STOP_REASONS
        ]

    def summary(self):
        exps = derived_exponents(self.params)
        return {
            "task": "martingale-check",
            "params": {
                "kappa": self.params.kappa,
                "rho": self.params.rho,
                "x_r": self.params.x_r,
            },
            "x": self.x,
            "t_max": self.t_max,
            "q_floor": self.q_floor,
            "n": self.n,
            "m0": self.m0,
            "m_hat": self.m_hat,
            "stderr": self.stderr,
            "passed": self.passed,
            "reasons": self.reasons,
            "alpha_theory": exps.alpha,
            "seed_info": self.seed_info,
            "extras": self.extras,
        }


# ---------------------------------------------------------------------------
# normalization map for the ordered two-point geometry


@dataclasses.dataclass(frozen=True)
class MobiusTriple:
    """The Mobius map z -> x z / ((1+x)(1-z)) sending (0, 1, 1+x) to
    (0, inf, -1).

    ``image_infinity`` is the image of the point at infinity, -x/(1+x);
    evaluating at z = 1 returns signed infinity.
    """

    x: float

    def __call__(self, z):
        if z == 1.0:
            return math.inf
        return self.x * z / ((1.0 + self.x) * (1.0 - z))

    @property
    def image_infinity(self) -> float:
        return -self.x / (1.0 + self.x)

    @property
    def triple_images(self):
        return (self(0.0), math.inf, self(1.0 + self.x))


def mobius_triple_map(x: float) -> MobiusTriple:
    """Normalizing map for the two-point geometry at separation x > 0."""
    if not (float(x) > 0.0 and math.isfinite(float(x))):
        raise InvalidConfig(f"x must be finite and > 0, got {x}")
    return MobiusTriple(x=float(x))
