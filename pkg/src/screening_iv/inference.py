"""Bootstrap inference, hazard-ratio curves and Monte Carlo studies.

Every random draw is keyed by integers rather than by call order:

* replicate ``r`` of a study simulates with ``replicate_seed(seed, r)``;
* bootstrap draw ``b`` of replicate ``r`` resamples with
  ``default_rng([seed, 1, r, b])`` (``[seed, b]`` for a standalone dataset).

Results are therefore identical whatever the number of worker processes,
and the first R' replicates of an R-replicate study match an R'-study.
"""

from __future__ import annotations

import io
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import SCREENING, TrialDataset
from .errors import AllPointsFailed, EmptyCurve, EstimationError, TooManyFailedReplicates
from .estimators import screening_hazards
from .iv import ESTIMAND_OF, ESTIMATORS, TrialSummary, resolve_methods, solve_estimating_equation
from .simulator import ScenarioConfig, marginal_true_loghr, simulate_trial, true_subgroup_quantities

Z95 = 1.959963984540054
RETRY_FACTOR = 10
NULL_VALUE = 0.0


def replicate_seed(seed: int, replicate: int) -> int:
    return int(np.random.SeedSequence([seed, 0, replicate]).generate_state(1, np.uint64)[0])


def resample_indices(dataset: TrialDataset, rng: np.random.Generator, stratified: bool = False) -> np.ndarray:
    """Case resampling; ``stratified`` keeps the arm sizes fixed."""
    n = len(dataset)
    if not stratified:
        return rng.integers(0, n, size=n)
    parts = []
    for arm in (0, 1):
        rows = np.flatnonzero(dataset.arm == arm)
        if rows.size:
            parts.append(rows[rng.integers(0, rows.size, size=rows.size)])
    return np.concatenate(parts)


def bootstrap_draws(dataset: TrialDataset, evaluators: Mapping[str, Callable], B: int, seed_key: Sequence[int],
                    make_context: Callable = lambda ds: ds, stratified: bool = False) -> dict:
    """Collect ``B`` successful bootstrap values for each evaluator.

    Draw ``b`` resamples with ``default_rng([*seed_key, b])``; a draw on which
    an evaluator fails is skipped for that evaluator only.  Drawing stops after
    ``RETRY_FACTOR * B`` resamples.  Returns ``{key: array of B values}`` or,
    for evaluators that never reached ``B``, a :class:`TooManyFailedReplicates`.
    """
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    values = {k: [] for k in evaluators}
    failures = {k: 0 for k in evaluators}
    max_draws = RETRY_FACTOR * B
    b = 0
    while b < max_draws and any(len(v) < B for v in values.values()):
        rng = np.random.default_rng([*seed_key, b])
        b += 1
        ctx = make_context(dataset.take(resample_indices(dataset, rng, stratified)))
        for key, fn in evaluators.items():
            if len(values[key]) >= B:
                continue
            try:
                values[key].append(float(fn(ctx)))
            except EstimationError:
                failures[key] += 1
    out = {}
    for key, vals in values.items():
        if len(vals) < B:
            out[key] = TooManyFailedReplicates(
                f"{key}: only {len(vals)} of {B} bootstrap replicates succeeded in {b} draws",
                {"draws": b, "failures": failures[key]},
            )
        else:
            out[key] = np.asarray(vals)
    return out


@dataclass(frozen=True)
class BootstrapResult:
    estimate: float
    se: float
    ci_lower: float
    ci_upper: float
    n_failed: int = 0


def normal_ci(estimate: float, se: float) -> tuple[float, float]:
    return estimate - Z95 * se, estimate + Z95 * se


def bootstrap_se(dataset: TrialDataset, estimator: str, t: float | None = None, B: int = 500, seed: int = 0,
                 stratified: bool = False) -> BootstrapResult:
    """Bootstrap standard error and normal-approximation 95% interval.

    The SE is the sample standard deviation of ``B`` replicate estimates;
    the interval is centred at the full-data estimate.
    """
    if B < 2:
        raise ValueError("bootstrap needs B >= 2")
    t = dataset.censor_horizon if t is None else t
    fn = ESTIMATORS[estimator]
    point = fn(TrialSummary(dataset, t)).value
    draws = bootstrap_draws(dataset, {estimator: lambda s: fn(s).value}, B, (seed,),
                            make_context=lambda ds: TrialSummary(ds, t), stratified=stratified)[estimator]
    if isinstance(draws, Exception):
        raise draws
    se = float(np.std(draws, ddof=1))
    lo, hi = normal_ci(point, se)
    return BootstrapResult(point, se, lo, hi)


# ---------------------------------------------------------------------------
# hazard ratio as a function of the evaluation time


@dataclass(frozen=True, eq=False)
class HrCurve:
    """log theta estimates over a time grid; NaN marks failed grid points."""

    grid: np.ndarray
    estimates: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray

    @property
    def ok(self) -> np.ndarray:
        return np.isfinite(self.estimates) & np.isfinite(self.se)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,log_theta,hr,se,ci_lower,ci_upper\n")
        for t, e, s, lo, hi in zip(self.grid, self.estimates, self.se, self.ci_lower, self.ci_upper):
            cells = [_g(t)] + ([_g(e), _g(math.exp(e)), _g(s), _g(lo), _g(hi)] if math.isfinite(e) and math.isfinite(s)
                               else [""] * 5)
            buf.write(",".join(cells) + "\n")
        return buf.getvalue()


def _g(x) -> str:
    return f"{float(x):.6g}"


def parse_grid(spec: str) -> np.ndarray:
    """``"start:stop:step"`` with stop included (up to rounding)."""
    try:
        start, stop, step = (float(x) for x in spec.split(":"))
    except ValueError as exc:
        raise ValueError(f"grid must look like start:stop:step, got {spec!r}") from exc
    if not step > 0:
        raise ValueError("grid step must be positive")
    if not (start > 0 and stop >= start):
        raise ValueError("grid needs 0 < start <= stop")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return np.round(start + step * np.arange(count), 12)


def hr_curve(dataset: TrialDataset, grid, B: int = 500, seed: int = 0, stratified: bool = False) -> HrCurve:
    """Estimating-equation estimates and bootstrap bands over ``grid``.

    Each bootstrap resample is shared across all grid points; its hazards
    are estimated once and truncated at each time.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be non-empty and strictly increasing")
    if grid[0] <= 0 or grid[-1] > dataset.censor_horizon:
        raise ValueError("grid must lie within (0, censor_horizon]")

    def summaries(ds):
        hz = screening_hazards(ds)
        return {t: TrialSummary(ds, t, hazards=hz) for t in grid}

    full = summaries(dataset)
    est = np.full(grid.size, np.nan)
    evaluators = {}
    for i, t in enumerate(grid):
        try:
            est[i] = solve_estimating_equation(full[t]).value
        except EstimationError:
            continue
        evaluators[i] = (lambda t_: lambda ctx: solve_estimating_equation(ctx[t_]).value)(t)
    se = np.full(grid.size, np.nan)
    if evaluators:
        draws = bootstrap_draws(dataset, evaluators, B, (seed,), make_context=summaries, stratified=stratified)
        for i, vals in draws.items():
            if not isinstance(vals, Exception):
                se[i] = float(np.std(vals, ddof=1))
    est = np.where(np.isfinite(se), est, np.nan)
    if not np.isfinite(est).any():
        raise AllPointsFailed("estimation failed at every grid point")
    lo, hi = normal_ci(est, se)
    return HrCurve(grid, est, se, lo, hi)


def select_timepoint(curve: HrCurve) -> dict:
    """Single-number summaries of a curve.

    ``min_variance`` is the grid point with the smallest bootstrap variance
    (earliest on ties); ``ivw`` the inverse-variance weighted mean of log theta.
    """
    ok = curve.ok & (curve.se > 0)
    if not ok.any():
        raise EmptyCurve("curve has no usable points")
    t, est, var = curve.grid[ok], curve.estimates[ok], curve.se[ok] ** 2
    k = int(np.argmin(var))
    w = 1.0 / var
    return {
        "min_variance": {"t": float(t[k]), "log_theta": float(est[k])},
        "ivw": float(np.sum(w * est) / np.sum(w)),
    }


# ---------------------------------------------------------------------------
# Monte Carlo study


@dataclass(frozen=True)
class EstimatorSummary:
    estimator: str
    estimand: str
    truth: float
    mean_estimate: float
    mean_se: float
    power: float
    coverage: float
    mcsd: float
    mce: float
    n_replicates: int
    n_failed: int
    above: float = 0.0
    below: float = 0.0


@dataclass(eq=False)
class StudyResult:
    rows: dict
    estimates: dict = field(repr=False)
    ses: dict = field(repr=False)
    eval_time: float = float("nan")

    CSV_COLUMNS = ("estimator", "truth", "mean_estimate", "mean_se", "power", "coverage",
                   "mcsd", "mce", "n_replicates", "n_failed")

    def __getitem__(self, key) -> EstimatorSummary:
        return self.rows[key]

    def to_csv(self) -> str:
        lines = [",".join(self.CSV_COLUMNS)]
        for row in self.rows.values():
            cells = [row.estimator]
            for col in self.CSV_COLUMNS[1:-2]:
                cells.append(_g(getattr(row, col)))
            cells += [str(row.n_replicates), str(row.n_failed)]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def study_truths(cfg: ScenarioConfig, keys, t: float, n_oracle: int = 10**6) -> dict:
    truths = {}
    hr_keys = [k for k in keys if k in ("ee", "mle")]
    if hr_keys:
        if cfg.confounded:
            lt = marginal_true_loghr(cfg, n_oracle, horizon=t)
        else:
            lt = math.log(cfg.model.theta)
        truths.update({k: lt for k in hr_keys})
    risk_keys = [k for k in keys if k not in ("ee", "mle")]
    if risk_keys:
        tq = true_subgroup_quantities(cfg.model, t, cfg.confounder)
        truths.update({k: getattr(tq, k) for k in risk_keys})
    return truths


def _run_replicate(job):
    cfg, keys, r, B, t, stratified = job
    ds = simulate_trial(cfg.with_seed(replicate_seed(cfg.seed, r)))
    base = TrialSummary(ds, t)
    point = {}
    for key in keys:
        try:
            point[key] = ESTIMATORS[key](base).value
        except EstimationError:
            pass
    evaluators = {k: (lambda k_: lambda s: ESTIMATORS[k_](s).value)(k) for k in point}
    out = {k: (math.nan, math.nan) for k in keys}
    if evaluators:
        draws = bootstrap_draws(ds, evaluators, B, (cfg.seed, 1, r),
                                make_context=lambda d: TrialSummary(d, t), stratified=stratified)
        for k, vals in draws.items():
            if not isinstance(vals, Exception):
                out[k] = (point[k], float(np.std(vals, ddof=1)))
    return out


def _summarize(key, truth, est, se) -> EstimatorSummary:
    ok = np.isfinite(est) & np.isfinite(se)
    e, s = est[ok], se[ok]
    n = int(ok.sum())
    if n == 0:
        nan = math.nan
        return EstimatorSummary(key, ESTIMAND_OF[key], truth, nan, nan, nan, nan, nan, nan, 0, est.size)
    lo, hi = normal_ci(e, s)
    mcsd = float(np.std(e, ddof=1)) if n > 1 else math.nan
    return EstimatorSummary(
        estimator=key,
        estimand=ESTIMAND_OF[key],
        truth=float(truth),
        mean_estimate=float(np.mean(e)),
        mean_se=float(np.mean(s)),
        power=float(np.mean((lo > NULL_VALUE) | (hi < NULL_VALUE))),
        coverage=float(np.mean((lo <= truth) & (truth <= hi))),
        mcsd=mcsd,
        mce=mcsd / math.sqrt(n),
        n_replicates=n,
        n_failed=int(est.size - n),
        above=float(np.mean(lo > truth)),
        below=float(np.mean(hi < truth)),
    )


def run_sim_study(cfg: ScenarioConfig, estimators="all", R: int = 500, B: int = 50, eval_t: float | None = None,
                  threads: int | None = 1, stratified: bool = False, n_oracle: int = 10**6,
                  truths: Mapping | None = None, progress: bool = False) -> StudyResult:
    """Replicate simulate -> estimate -> bootstrap ``R`` times and summarize.

    ``truths`` overrides the oracle values (useful when they are already
    known); otherwise they come from quadrature and, under confounding, the
    marginal hazard-ratio oracle.
    """
    if R < 2:
        raise ValueError("a simulation study needs R >= 2 replicates")
    if B < 2:
        raise ValueError("a simulation study needs B >= 2 bootstrap draws")
    keys = resolve_methods(estimators)
    t = cfg.censor_horizon if eval_t is None else float(eval_t)
    if not 0 < t <= cfg.censor_horizon:
        raise ValueError("eval_t must lie in (0, censor_horizon]")
    truth = dict(truths) if truths is not None else study_truths(cfg, keys, t, n_oracle)

    jobs = [(cfg, keys, r, B, t, stratified) for r in range(R)]
    workers = threads or os.cpu_count() or 1
    results = []
    if workers == 1:
        for i, job in enumerate(jobs):
            results.append(_run_replicate(job))
            if progress:
                print(f"replicate {i + 1}/{R}", file=sys.stderr)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, res in enumerate(pool.map(_run_replicate, jobs, chunksize=max(1, R // (4 * workers)))):
                results.append(res)
                if progress:
                    print(f"replicate {i + 1}/{R}", file=sys.stderr)

    estimates = {k: np.array([res[k][0] for res in results]) for k in keys}
    ses = {k: np.array([res[k][1] for res in results]) for k in keys}
    rows = {k: _summarize(k, truth[k], estimates[k], ses[k]) for k in keys}
    return StudyResult(rows, estimates, ses, t)
