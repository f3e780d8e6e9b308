"""Replica orchestration, interval statistics, slope fits, report I/O.

The execution contract is rigid on purpose: replica chunks are computed
independently (serially or in a process pool), folded into small per-chunk
summaries, and merged in chunk order.  Every aggregate is a sum or a count,
so the merged numbers — and therefore every emitted byte — are independent
of worker count, completion order, and scheduling.
"""

from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats as _stats

from . import __version__
from .engine import run_chunk
from .errors import DegenerateAbscissae, InvalidConfig, IoFailure, SlebError
from .rng import CHUNK


def wilson_ci(hits: int, n: int, level: float = 0.95):
    """Wilson score interval for a binomial proportion.

    Returns (low, high); exact 0 and 1 at the empty/full boundaries.
    """
    if n < 1:
        raise InvalidConfig(f"wilson_ci needs n >= 1, got {n}")
    if not 0 <= hits <= n:
        raise InvalidConfig(f"hits must lie in [0, n], got {hits}/{n}")
    if not 0.0 < level < 1.0:
        raise InvalidConfig(f"confidence level must be in (0, 1), got {level}")
    z = float(_stats.norm.ppf(0.5 * (1.0 + level)))
    phat = hits / n
    denom = 1.0 + z * z / n
    centre = (phat + z * z / (2.0 * n)) / denom
    half = z * math.sqrt(phat * (1.0 - phat) / n + z * z / (4.0 * n * n)) / denom
    low = 0.0 if hits == 0 else max(0.0, centre - half)
    high = 1.0 if hits == n else min(1.0, centre + half)
    return low, high


def fit_power_law(pairs):
    """Weighted least-squares line through (log_x, log_y, weight) triples.

    Returns {"slope", "intercept", "stderr"} with the slope standard error
    taken from the residual variance (zero for a perfect two-point or
    noiseless fit).  Raises DegenerateAbscissae unless at least two distinct
    abscissae are present.
    """
    rows = [(float(a), float(b), float(w)) for a, b, w in pairs]
    if any(not (w > 0.0) for _, _, w in rows):
        raise InvalidConfig("fit weights must be > 0")
    x = np.array([r[0] for r in rows])
    y = np.array([r[1] for r in rows])
    w = np.array([r[2] for r in rows])
    if np.unique(x).size < 2:
        raise DegenerateAbscissae(
            f"power-law fit needs >= 2 distinct abscissae, got {np.unique(x).size}"
        )
    wt = w.sum()
    xb = (w * x).sum() / wt
    yb = (w * y).sum() / wt
    sxx = (w * (x - xb) ** 2).sum()
    sxy = (w * (x - xb) * (y - yb)).sum()
    slope = sxy / sxx
    intercept = yb - slope * xb
    resid = y - slope * x - intercept
    dof = len(rows) - 2
    s2 = (w * resid ** 2).sum() / dof if dof > 0 else 0.0
    return {
        "slope": float(slope),
        "intercept": float(intercept),
        "stderr": float(math.sqrt(s2 / sxx)) if s2 > 0.0 else 0.0,
    }


def _chunk_job(payload):
    task, index, fold, fold_args = payload
    try:
        return fold(run_chunk(task, index), *fold_args)
    except SlebError as exc:
        lo = index * CHUNK
        hi = min(task.n_replicas, lo + CHUNK) - 1
        exc.args = (f"replica chunk {index} (replicas {lo}..{hi}): {exc}",)
        raise


def map_chunks(task, fold, fold_args=(), workers: int = 1):
    """Fold every replica chunk of ``task``; list of results in chunk order.

    ``fold`` must be a module-level function (picklable) taking a ChunkResult
    plus ``fold_args`` and returning a small summary.  With workers > 1 the
    chunks are dispatched to a process pool; ``pool.map`` preserves argument
    order, so the returned list — and anything merged from it — is identical
    for every worker count.
    """
    jobs = [(task, i, fold, fold_args) for i in range(task.n_chunks)]
    if workers <= 1:
        return [_chunk_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_chunk_job, jobs))


@dataclasses.dataclass(frozen=True)
class RunConfig:
    """One orchestrated run: an estimator by name, its arguments, and I/O.

    ``task_args`` are keyword arguments for the named estimator beyond the
    common (n, seed, dt, workers) block, which is filled from the fields
    here.  ``out`` is a base path; emit_report appends .csv/.json.
    """

    task: str
    task_args: dict
    n_replicas: int
    base_seed: int
    worker_count: int = 1
    dt: float = 1e-4
    out: str | None = None
    format: str = "both"

    def __post_init__(self):
        if self.n_replicas < 1:
            raise InvalidConfig("n_replicas must be >= 1")
        if not self.dt > 0.0:
            raise InvalidConfig("dt must be > 0")
        if self.worker_count < 1:
            raise InvalidConfig("worker_count must be >= 1")
        if self.format not in ("csv", "json", "both"):
            raise InvalidConfig(f"unknown output format {self.format!r}")


def _task_registry():
    # Late imports: the estimator modules are built on top of this one.
    from . import dimension, estimators, graphhit

    return {
        "one-point": estimators.estimate_one_point,
        "two-point": estimators.estimate_two_point,
        "ordered-two-point": estimators.estimate_ordered_two_point,
        "conditional-one-point": estimators.estimate_conditional_one_point,
        "martingale-check": estimators.martingale_test,
        "dimension": dimension.dimension_report,
        "graph-hit": graphhit.estimate_graph_hitting,
    }


def run_replicas(config: RunConfig):
    """Dispatch to the named estimator; emit its report when ``out`` is set.

    Replicas are deterministic in (base_seed, replica index) alone, and all
    aggregation inside the estimators is commutative, so the same config
    yields byte-identical output files at any worker count.
    """
    registry = _task_registry()
    if config.task not in registry:
        raise InvalidConfig(
            f"unknown task {config.task!r}; expected one of {sorted(registry)}"
        )
    fn = registry[config.task]
    report = fn(
        **config.task_args,
        n=config.n_replicas,
        seed=config.base_seed,
        dt=config.dt,
        workers=config.worker_count,
    )
    if config.out is not None:
        emit_report(report, config.format, config.out)
    return report


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(dataclasses.asdict(obj))
    return obj


def emit_report(report, format: str, path) -> None:
    """Write ``report`` as CSV data rows and/or a JSON summary.

    ``path`` is a base path without extension; ``<path>.csv`` holds the data
    rows (report.csv_rows()) and ``<path>.json`` the summary dict
    (report.summary()) plus the library version.  The parent directory must
    already exist — reports never create directories.
    """
    if format not in ("csv", "json", "both"):
        raise InvalidConfig(f"unknown output format {format!r}")
    base = Path(path)
    if not base.parent.is_dir():
        raise IoFailure(f"output directory {base.parent} does not exist")
    try:
        if format in ("csv", "both"):
            rows = report.csv_rows()
            lines = []
            if rows:
                cols = list(rows[0].keys())
                lines.append(",".join(cols))
                for row in rows:
                    lines.append(",".join(_cell(row[c]) for c in cols))
            Path(str(base) + ".csv").write_text("\n".join(lines) + "\n")
        if format in ("json", "both"):
            summary = dict(report.summary())
            summary.setdefault("sleb_version", __version__)
            text = json.dumps(_jsonable(summary), indent=2, sort_keys=True)
            Path(str(base) + ".json").write_text(text + "\n")
    except OSError as exc:
        raise IoFailure(f"failed writing report to {base}: {exc}") from exc
