"""Subgroup effect estimators.

Two estimators of the delayed-vs-early cancer-mortality hazard ratio in the
screening-detectable subgroup, both using randomization as the instrument:

* ``ee``: solve  F_control(t) = P3(log theta; screening-arm hazards)  for
  log theta, where the left side is the observed control-arm cancer
  incidence and the right side the product-integral of
  :class:`~screening_iv.estimators.ControlArmModel`;
* ``mle``: maximize the multinomial likelihood of the control arm's
  (cancer death, other death, alive) counts at t.

Four comparators are risk-scale contrasts built from cumulative incidences:
subgroup absolute/proportional risk reduction (``acfr``/``pcfr``) and the
intention-to-screen differences (``its_abs``/``its_prop``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping

import numpy as np
from scipy.optimize import brentq

from .core import CANCER_DEATH, CONTROL, OTHER_DEATH, SCREENING, TrialDataset
from .estimators import ControlArmModel, competing_cif, screening_hazards, state1_exits
from .errors import (
    BoundaryMaximum,
    DegenerateLikelihood,
    EstimationError,
    InsufficientEvents,
    NoRootInBracket,
    UnstableDenominator,
    ZeroControlIncidence,
    ZeroDetectionIncidence,
)

LOG_THETA_BOUND = 12.0
ROOT_BRACKETS = ((-5.0, 5.0), (-10.0, 10.0), (-LOG_THETA_BOUND, LOG_THETA_BOUND))
ROOT_XTOL = 1e-12
GOLDEN_TOL = 1e-6
LIKELIHOOD_SCAN_STEP = 0.25
BOUNDARY_MARGIN = 1e-3
PCFR_MIN_DENOMINATOR = 1e-8

ESTIMANDS = ("log_theta_ee", "log_theta_mle", "acfr", "pcfr", "its_abs", "its_prop")


@dataclass
class EstimateResult:
    estimand: str
    value: float
    eval_time: float
    diagnostics: dict = field(default_factory=dict)
    se: float | None = None
    ci_lower: float | None = None
    ci_upper: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise EstimationError(f"{self.estimand}: non-finite estimate {self.value!r}", self.diagnostics)

    def to_json(self) -> dict:
        doc = {"estimand": self.estimand, "value": self.value, "eval_time": self.eval_time}
        if self.se is not None:
            doc.update(se=self.se, ci_lower=self.ci_lower, ci_upper=self.ci_upper)
        doc["diagnostics"] = {k: _jsonable(v) for k, v in self.diagnostics.items()}
        return doc


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


class TrialSummary:
    """Per-dataset quantities at one evaluation time, computed on demand.

    Several estimators share the same hazards and incidences, so bootstrap
    replicates build one summary and evaluate every requested estimator on it.
    """

    def __init__(self, dataset: TrialDataset, t: float, hazards: Mapping | None = None):
        if not 0 < t <= dataset.censor_horizon:
            raise ValueError(f"evaluation time {t} outside (0, {dataset.censor_horizon}]")
        self.dataset = dataset
        self.t = float(t)
        self._hazards = hazards

    @cached_property
    def _control(self):
        m = self.dataset.arm == CONTROL
        return self.dataset.event_time[m], self.dataset.event_type[m]

    @cached_property
    def _screening(self):
        m = self.dataset.arm == SCREENING
        return self.dataset.event_time[m], self.dataset.event_type[m]

    @cached_property
    def control_cancer(self) -> float:
        return competing_cif(*self._control, CANCER_DEATH, self.t)

    @cached_property
    def control_other(self) -> float:
        return competing_cif(*self._control, OTHER_DEATH, self.t)

    @cached_property
    def screening_cancer(self) -> float:
        return competing_cif(*self._screening, CANCER_DEATH, self.t)

    @cached_property
    def _state1(self):
        return state1_exits(self.dataset, SCREENING)

    @cached_property
    def detection_incidence(self) -> float:
        return competing_cif(*self._state1, 2, self.t)

    @cached_property
    def direct_cancer_incidence(self) -> float:
        return competing_cif(*self._state1, CANCER_DEATH, self.t)

    @cached_property
    def control_counts(self) -> tuple[int, int, int]:
        """(cancer deaths, other deaths, neither) by t, type I censoring at t."""
        time, typ = self._control
        by_t = time <= self.t
        n3 = int(np.count_nonzero(by_t & (typ == CANCER_DEATH)))
        n4 = int(np.count_nonzero(by_t & (typ == OTHER_DEATH)))
        return n3, n4, time.shape[0] - n3 - n4

    @cached_property
    def model(self) -> ControlArmModel:
        hz = self._hazards if self._hazards is not None else screening_hazards(self.dataset)
        return ControlArmModel(hz, self.t)

    def check_hr_preconditions(self):
        ds, t = self.dataset, self.t
        scr = ds.arm == SCREENING
        n_ctrl_cancer = self.control_counts[0]
        n_detect = int(np.count_nonzero(scr & (ds.detect_time <= t)))
        n_post = int(np.count_nonzero(scr & ds.detected & (ds.event_type == CANCER_DEATH) & (ds.event_time <= t)))
        counts = {"control_cancer_deaths": n_ctrl_cancer, "detections": n_detect,
                  "post_detection_cancer_deaths": n_post}
        if n_ctrl_cancer < 1 or n_detect < 1 or n_post < 1:
            raise InsufficientEvents(f"too few events by t={t}: {counts}", counts)


def _summary(dataset_or_summary, t) -> TrialSummary:
    if isinstance(dataset_or_summary, TrialSummary):
        if t is not None and t != dataset_or_summary.t:
            raise ValueError("summary was built for a different evaluation time")
        return dataset_or_summary
    ds = dataset_or_summary
    return TrialSummary(ds, ds.censor_horizon if t is None else t)


def solve_estimating_equation(dataset, t: float | None = None) -> EstimateResult:
    """Root of  model P3(log theta) - observed control cancer incidence."""
    s = _summary(dataset, t)
    s.check_hr_preconditions()
    target = s.control_cancer
    model = s.model

    def residual(lt):
        return model.cif(lt, CANCER_DEATH) - target

    lo = hi = None
    for a, b in ROOT_BRACKETS:
        fa, fb = residual(a), residual(b)
        if fa == 0.0:
            root, info = a, None
            break
        if fb == 0.0:
            root, info = b, None
            break
        if fa < 0 < fb:
            lo, hi = a, b
            root, info = brentq(residual, a, b, xtol=ROOT_XTOL, full_output=True)
            break
    else:
        lo_p = model.cif(-LOG_THETA_BOUND)
        hi_p = model.cif(LOG_THETA_BOUND)
        raise NoRootInBracket(
            f"control cancer incidence {target:.6g} outside attainable range [{lo_p:.6g}, {hi_p:.6g}]",
            {"target": target, "attainable": (lo_p, hi_p), "bracket": ROOT_BRACKETS[-1]},
        )
    value = float(root)
    diag = {
        "bracket": (lo, hi),
        "iterations": 0 if info is None else info.iterations,
        "target": target,
        "residual": residual(value),
        "clamp_count": model.last_clamp_count,
    }
    return EstimateResult("log_theta_ee", value, s.t, diag)


def golden_section_max(f: Callable[[float], float], lo: float, hi: float, tol: float = GOLDEN_TOL):
    """Maximize a unimodal ``f`` on [lo, hi]; returns (argmax, iterations)."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    it = 0
    while b - a > tol:
        it += 1
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b), it


def _xlogy(n, p):
    if n == 0:
        return 0.0
    return n * math.log(p) if p > 0 else -math.inf


def _multinomial_loglik(counts, p3, p4):
    n3, n4, n0 = counts
    rest = np.maximum(1.0 - p3 - p4, 0.0)
    with np.errstate(divide="ignore"):
        terms = [n * np.log(p) if n else np.zeros_like(p) for n, p in ((n3, p3), (n4, p4), (n0, rest))]
    return terms[0] + terms[1] + terms[2]


def control_loglik(model: ControlArmModel, counts, log_theta: float) -> float:
    n3, n4, n0 = counts
    p3, p4 = model.cifs(log_theta)
    return _xlogy(n3, p3) + _xlogy(n4, p4) + _xlogy(n0, max(1.0 - p3 - p4, 0.0))


def maximize_likelihood(dataset, t: float | None = None) -> EstimateResult:
    """Multinomial control-arm likelihood maximized over log theta.

    Screening-arm contributions do not involve theta once the screening-arm
    hazards are plugged in, so only control-arm counts at t enter.

    The plug-in likelihood need not be unimodal (clamped 2->3 increments
    create a plateau at large log theta), so a coarse grid scan locates the
    global maximum before golden-section refinement within one grid step.
    """
    s = _summary(dataset, t)
    s.check_hr_preconditions()
    counts = s.control_counts
    if counts[0] == 0:
        raise DegenerateLikelihood("no control-arm cancer deaths: likelihood is monotone", {"counts": counts})
    model = s.model

    def loglik(lt):
        return control_loglik(model, counts, lt)

    grid = np.arange(-LOG_THETA_BOUND, LOG_THETA_BOUND + LIKELIHOOD_SCAN_STEP / 2, LIKELIHOOD_SCAN_STEP)
    best = grid[int(np.argmax(_multinomial_loglik(counts, *model.cifs_many(grid))))]
    lo = max(best - LIKELIHOOD_SCAN_STEP, -LOG_THETA_BOUND)
    hi = min(best + LIKELIHOOD_SCAN_STEP, LOG_THETA_BOUND)
    value, iters = golden_section_max(loglik, lo, hi)
    diag = {"search_interval": (lo, hi), "iterations": iters,
            "counts": counts, "clamp_count": model.last_clamp_count}
    if LOG_THETA_BOUND - abs(value) < BOUNDARY_MARGIN:
        raise BoundaryMaximum(f"likelihood maximized at the search boundary ({value:.4g})", diag)
    return EstimateResult("log_theta_mle", float(value), s.t, diag)


def solve_estimating_equations_joint(dataset, t: float | None = None, max_iter: int = 100,
                                     tol: float = 1e-10) -> tuple[EstimateResult, EstimateResult]:
    """Relax the no-effect-on-other-cause assumption.

    Solves the cancer and other-cause incidence equations jointly for
    (log theta_cancer, log theta_other) by damped Newton steps with a
    finite-difference Jacobian.
    """
    s = _summary(dataset, t)
    s.check_hr_preconditions()
    model = s.model
    target = np.array([s.control_cancer, s.control_other])

    def resid(x):
        return np.array(model.cifs(x[0], x[1])) - target

    x = np.zeros(2)
    r = resid(x)
    h = 1e-6
    for it in range(1, max_iter + 1):
        jac = np.column_stack([(resid(x + h * e) - r) / h for e in np.eye(2)])
        try:
            step = np.linalg.solve(jac, -r)
        except np.linalg.LinAlgError as exc:
            raise NoRootInBracket("singular Jacobian in joint solve", {"iterations": it}) from exc
        lam = 1.0
        while True:
            cand = np.clip(x + lam * step, -LOG_THETA_BOUND, LOG_THETA_BOUND)
            rc = resid(cand)
            if np.linalg.norm(rc) < np.linalg.norm(r) or lam < 1e-8:
                break
            lam /= 2
        x, r = cand, rc
        if np.max(np.abs(r)) < tol:
            break
    else:
        raise NoRootInBracket("joint solve did not converge", {"iterations": max_iter, "residual": r.tolist()})
    diag = {"iterations": it, "residual": r.tolist()}
    return (EstimateResult("log_theta_ee", float(x[0]), s.t, dict(diag)),
            EstimateResult("log_theta_other_ee", float(x[1]), s.t, dict(diag)))


def acfr_estimate(dataset, t: float | None = None) -> EstimateResult:
    """Subgroup absolute risk reduction: ITS difference over detection incidence."""
    s = _summary(dataset, t)
    det = s.detection_incidence
    if det <= 0:
        raise ZeroDetectionIncidence(f"no detections in the screening arm by t={s.t}")
    num = s.control_cancer - s.screening_cancer
    return EstimateResult("acfr", num / det, s.t, {"numerator": num, "denominator": det})


def pcfr_estimate(dataset, t: float | None = None) -> EstimateResult:
    """Subgroup proportional risk reduction.

    The denominator, control cancer incidence minus screening-arm cancer
    deaths without detection, estimates the subgroup's delayed-treatment
    cancer mortality.
    """
    s = _summary(dataset, t)
    num = s.control_cancer - s.screening_cancer
    den = s.control_cancer - s.direct_cancer_incidence
    if abs(den) < PCFR_MIN_DENOMINATOR:
        raise UnstableDenominator(f"PCFR denominator {den:.3g} too close to zero", {"denominator": den})
    return EstimateResult("pcfr", num / den, s.t, {"numerator": num, "denominator": den})


def its_estimates(dataset, t: float | None = None) -> dict[str, EstimateResult]:
    s = _summary(dataset, t)
    ctrl, scr = s.control_cancer, s.screening_cancer
    if ctrl <= 0:
        raise ZeroControlIncidence(f"no control-arm cancer deaths by t={s.t}")
    diag = {"control_cif": ctrl, "screening_cif": scr}
    return {
        "its_abs": EstimateResult("its_abs", ctrl - scr, s.t, dict(diag)),
        "its_prop": EstimateResult("its_prop", 1.0 - scr / ctrl, s.t, dict(diag)),
    }


def _its_abs(dataset, t=None):
    return its_estimates(dataset, t)["its_abs"]


def _its_prop(dataset, t=None):
    return its_estimates(dataset, t)["its_prop"]


# estimator selector -> callable(dataset_or_summary, t) -> EstimateResult
ESTIMATORS: dict[str, Callable] = {
    "ee": solve_estimating_equation,
    "mle": maximize_likelihood,
    "acfr": acfr_estimate,
    "pcfr": pcfr_estimate,
    "its_abs": _its_abs,
    "its_prop": _its_prop,
}

ESTIMAND_OF = {
    "ee": "log_theta_ee", "mle": "log_theta_mle", "acfr": "acfr",
    "pcfr": "pcfr", "its_abs": "its_abs", "its_prop": "its_prop",
}

METHOD_GROUPS = {
    "ee": ("ee",), "mle": ("mle",), "acfr": ("acfr",), "pcfr": ("pcfr",),
    "its": ("its_abs", "its_prop"), "its_abs": ("its_abs",), "its_prop": ("its_prop",),
    "all": tuple(ESTIMATORS),
}


def resolve_methods(spec) -> tuple[str, ...]:
    """Expand a method name or list (``all``, ``its``, ...) into estimator keys."""
    names = [spec] if isinstance(spec, str) else list(spec)
    out = []
    for name in names:
        for part in str(name).split(","):
            part = part.strip().lower()
            if part not in METHOD_GROUPS:
                raise ValueError(f"unknown estimator {part!r}; choose from {sorted(METHOD_GROUPS)}")
            out.extend(k for k in METHOD_GROUPS[part] if k not in out)
    return tuple(out)


def estimate(dataset, methods="all", t: float | None = None) -> dict:
    """Run several estimators on one dataset, sharing intermediate work.

    Returns ``{key: EstimateResult or EstimationError}``.
    """
    s = _summary(dataset, t)
    out = {}
    for key in resolve_methods(methods):
        try:
            out[key] = ESTIMATORS[key](s)
        except EstimationError as exc:
            out[key] = exc
    return out
