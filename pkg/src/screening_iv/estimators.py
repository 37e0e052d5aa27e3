"""Nonparametric building blocks.

Nelson-Aalen increments for the five screening-arm transitions, competing
risks cumulative incidence (Aalen-Johansen), and the product-integral that
turns screening-arm hazard increments into model-implied control-arm
incidences for a given delayed-vs-early hazard ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import (
    ALL_TRANSITIONS,
    CANCER_DEATH,
    CENSORED,
    CONTROL,
    OTHER_DEATH,
    SCREENING,
    T12,
    T13,
    T14,
    T23,
    T24,
    HazardEstimate,
    TransitionId,
    TrialDataset,
)
from .errors import EmptyRiskSet, OccupationOutOfRange, WrongArmForTransition

DETECTED = 2
OCCUPATION_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class RiskSetTable:
    transition: TransitionId
    event_times: np.ndarray
    n_events: np.ndarray
    n_at_risk: np.ndarray

    def increments(self) -> np.ndarray:
        return self.n_events / self.n_at_risk


def state1_exits(dataset: TrialDataset, arm: int):
    """(exit time, exit type) from state 1; type 2 marks a detection."""
    m = dataset.arm == arm
    det = dataset.detect_time[m]
    ev = dataset.event_time[m]
    typ = dataset.event_type[m].astype(np.int64)
    has = ~np.isnan(det)
    return np.where(has, det, ev), np.where(has, DETECTED, typ)


def _counting_table(entry, exit, event, *, entry_inclusive: bool):
    """Distinct event times with event counts and risk-set sizes.

    A subject is at risk at ``s`` when ``entry < s <= exit`` (``entry <= s``
    with ``entry_inclusive``); censorings tied with an event time count as
    still at risk.
    """
    times, n_events = np.unique(exit[event], return_counts=True)
    exits = np.sort(exit)
    gone = np.searchsorted(exits, times, side="left")
    if entry is None:
        entered = np.full(times.shape, exit.shape[0])
    else:
        entries = np.sort(entry)
        entered = np.searchsorted(entries, times, side="right" if entry_inclusive else "left")
    return times, n_events, entered - gone


def risk_set_table(dataset: TrialDataset, transition, arm: int) -> RiskSetTable:
    tid = TransitionId.parse(transition)
    if tid.from_state == 1:
        exit, kind = state1_exits(dataset, arm)
        times, d, y = _counting_table(None, exit, kind == tid.to_state, entry_inclusive=False)
    else:
        if arm != SCREENING:
            raise WrongArmForTransition(f"transition {tid} is only observable in the screening arm")
        m = (dataset.arm == SCREENING) & dataset.detected
        entry = dataset.detect_time[m]
        exit = dataset.event_time[m]
        event = dataset.event_type[m] == tid.to_state
        times, d, y = _counting_table(entry, exit, event, entry_inclusive=True)
    if np.any(y <= 0):
        bad = float(times[np.argmax(y <= 0)])
        raise EmptyRiskSet(f"no subjects at risk for {tid} at t={bad}", {"time": bad})
    return RiskSetTable(tid, times, d, y)


def nelson_aalen(dataset: TrialDataset, transition, arm: int = SCREENING) -> HazardEstimate:
    """Nelson-Aalen increments dN/Y for one transition in one arm.

    Exits from state 1 are detection (1->2), cancer death before detection
    (1->3), other death before detection (1->4) or censoring.  For 2->l the
    detected subjects enter the risk set at their detection time.
    """
    table = risk_set_table(dataset, transition, arm)
    return HazardEstimate(table.event_times, table.increments())


def screening_hazards(dataset: TrialDataset) -> dict:
    return {tid: nelson_aalen(dataset, tid, SCREENING) for tid in ALL_TRANSITIONS}


def competing_cif(times, types, cause: int, t: float) -> float:
    """Aalen-Johansen cumulative incidence of ``cause`` by ``t``.

    ``types`` equal to 0 are censorings; any other value is a competing exit.
    """
    times = np.asarray(times, dtype=float)
    types = np.asarray(types)
    event = types != CENSORED
    ev_times, d_all, y = _counting_table(None, times, event, entry_inclusive=False)
    keep = ev_times <= t
    ev_times, d_all, y = ev_times[keep], d_all[keep], y[keep]
    if ev_times.size == 0:
        return 0.0
    hit = times[types == cause]
    d_cause = np.bincount(np.searchsorted(ev_times, hit[hit <= t]), minlength=ev_times.size)
    surv = np.cumprod(1.0 - d_all / y)
    surv_prev = np.concatenate(([1.0], surv[:-1]))
    return float(np.sum(surv_prev * d_cause / y))


def cumulative_incidence(dataset: TrialDataset, arm: int, cause: int, t: float) -> float:
    """Probability of death from ``cause`` by ``t`` in one arm.

    In the screening arm cancer deaths before and after detection both count.
    """
    if t > dataset.censor_horizon:
        raise ValueError("t must not exceed the censoring horizon")
    if cause not in (CANCER_DEATH, OTHER_DEATH):
        raise ValueError("cause must be 3 or 4")
    m = dataset.arm == arm
    return competing_cif(dataset.event_time[m], dataset.event_type[m], cause, t)


def state1_incidence(dataset: TrialDataset, arm: int, target: int, t: float) -> float:
    """Cumulative incidence of leaving state 1 towards ``target`` by ``t``.

    ``target=2`` is the detection incidence; ``target=3`` counts cancer
    deaths without prior detection.
    """
    if t > dataset.censor_horizon:
        raise ValueError("t must not exceed the censoring horizon")
    exit, kind = state1_exits(dataset, arm)
    return competing_cif(exit, kind, target, t)


_CHUNK = 12


class ControlArmModel:
    """Product-integral over the merged jump grid of the five hazards.

    Built once per (hazard set, t); evaluating at a new hazard ratio only
    redoes the state-2 recursion.  ``log_theta_other`` scales the 2->4
    increments for the two-parameter extension.
    """

    def __init__(self, hazards: Mapping, t: float):
        hz = {TransitionId.parse(k): v for k, v in hazards.items()}
        parts = [hz.get(tid, HazardEstimate.empty()).truncated(t) for tid in ALL_TRANSITIONS]
        grid = np.unique(np.concatenate([p.jump_times for p in parts])) if parts else np.empty(0)
        inc = {}
        for tid, p in zip(ALL_TRANSITIONS, parts):
            a = np.zeros(grid.size)
            a[np.searchsorted(grid, p.jump_times)] = p.increments
            inc[tid] = a
        self.t = t
        self.grid = grid
        self.d12, self.d13, self.d14 = inc[T12], inc[T13], inc[T14]
        self.d23, self.d24 = inc[T23], inc[T24]

        out1 = self.d12 + self.d13 + self.d14
        scale1 = np.where(out1 > 1.0, 1.0 / np.where(out1 > 1.0, out1, 1.0), 1.0)
        self.clamped_state1 = int(np.count_nonzero(out1 > 1.0))
        p1 = np.cumprod(1.0 - out1 * scale1)
        self.p1 = p1
        self.p1_prev = np.concatenate(([1.0], p1[:-1]))
        self.inflow = self.p1_prev * self.d12 * scale1
        self.direct3 = float(np.sum(self.p1_prev * self.d13 * scale1))
        self.direct4 = float(np.sum(self.p1_prev * self.d14 * scale1))
        self.last_clamp_count = 0
        # state 2 only loses mass at 2->3 / 2->4 jumps; between them it just
        # accumulates inflow, which grid scans add up in one step
        self.exit_cols = np.flatnonzero(self.d23 + self.d24 > 0)
        cum_in = np.concatenate(([0.0], np.cumsum(self.inflow)))
        starts = np.concatenate(([0], self.exit_cols[:-1]))
        self.exit_inflow = cum_in[self.exit_cols] - cum_in[starts]

    def _state2(self, log_theta: float, log_theta_other: float = 0.0):
        """Pre-step state-2 occupation and the effective 2->3 / 2->4 fractions."""
        h3 = math.exp(log_theta) * self.d23
        h4 = math.exp(log_theta_other) * self.d24
        out = h3 + h4
        over = out > 1.0
        n_clamp = int(np.count_nonzero(over))
        self.last_clamp_count = n_clamp
        if n_clamp:
            s = np.where(over, 1.0 / np.where(over, out, 1.0), 1.0)
            h3, h4, out = h3 * s, h4 * s, out * s
        stay = 1.0 - out
        p2 = None
        if self.grid.size and np.all(stay > 0):
            log_stay = np.cumsum(np.log1p(-out))
            if log_stay[-1] > -600.0:
                p2 = np.exp(log_stay) * np.cumsum(self.inflow * np.exp(-log_stay))
        if p2 is None:
            p2 = np.empty(self.grid.size)
            acc = 0.0
            for k in range(self.grid.size):
                acc = acc * stay[k] + self.inflow[k]
                p2[k] = acc
        p2_prev = np.concatenate(([0.0], p2[:-1])) if p2.size else p2
        return p2, p2_prev, h3, h4

    def cifs(self, log_theta: float, log_theta_other: float = 0.0) -> tuple[float, float]:
        """Model-implied control-arm (cancer, other-cause) incidences at t."""
        if self.grid.size == 0:
            return 0.0, 0.0
        _, p2_prev, h3, h4 = self._state2(log_theta, log_theta_other)
        p3 = self.direct3 + float(np.dot(p2_prev, h3))
        p4 = self.direct4 + float(np.dot(p2_prev, h4))
        for v in (p3, p4, p3 + p4):
            if v < -OCCUPATION_EPS or v > 1.0 + OCCUPATION_EPS:
                raise OccupationOutOfRange(f"occupation probability {v!r} outside [0, 1]",
                                           {"log_theta": log_theta})
        return p3, p4

    def cifs_many(self, log_thetas) -> tuple[np.ndarray, np.ndarray]:
        """:meth:`cifs` for a vector of log theta values (used by grid scans)."""
        lts = np.asarray(log_thetas, dtype=float)
        if self.grid.size == 0:
            return np.zeros(lts.size), np.zeros(lts.size)
        cols = self.exit_cols
        if cols.size == 0:
            return np.full(lts.size, self.direct3), np.full(lts.size, self.direct4)
        h3 = np.exp(lts)[:, None] * self.d23[cols][None, :]
        h4 = np.broadcast_to(self.d24[cols], h3.shape)
        out = h3 + h4
        scale = np.where(out > 1.0, 1.0 / np.where(out > 1.0, out, 1.0), 1.0)
        h3, h4, out = h3 * scale, h4 * scale, out * scale
        # pre-step occupation at exit column i is
        #   pre_i = pre_{i-1} * stay_{i-1} + inflow since the previous exit column,
        # solved chunkwise in closed form.  A log-stay is floored at -50 (a factor
        # below 1e-21; a clamped step has stay 0) so exp(+-L) stays finite in a chunk.
        with np.errstate(divide="ignore"):
            log_stay = np.maximum(np.log1p(-np.minimum(out, 1.0)), -50.0)
        log_stay = np.concatenate([np.zeros((lts.size, 1)), log_stay[:, :-1]], axis=1)
        pre = np.empty_like(out)
        carry = np.zeros(lts.size)
        for a in range(0, cols.size, _CHUNK):
            part = slice(a, a + _CHUNK)
            cum = np.cumsum(log_stay[:, part], axis=1)
            pre[:, part] = np.exp(cum) * (carry[:, None] + np.cumsum(self.exit_inflow[part] * np.exp(-cum), axis=1))
            carry = pre[:, part][:, -1]
        p3 = self.direct3 + np.sum(pre * h3, axis=1)
        p4 = self.direct4 + np.sum(pre * h4, axis=1)
        return p3, p4

    def cif(self, log_theta: float, cause: int = CANCER_DEATH, log_theta_other: float = 0.0) -> float:
        p3, p4 = self.cifs(log_theta, log_theta_other)
        return p3 if cause == CANCER_DEATH else p4

    def occupation(self, log_theta: float, log_theta_other: float = 0.0) -> np.ndarray:
        """State occupation after each grid step, shape (len(grid), 4)."""
        if self.grid.size == 0:
            return np.array([[1.0, 0.0, 0.0, 0.0]])
        p2, p2_prev, h3, h4 = self._state2(log_theta, log_theta_other)
        out1 = self.d12 + self.d13 + self.d14
        scale1 = np.where(out1 > 1.0, 1.0 / np.where(out1 > 1.0, out1, 1.0), 1.0)
        p3 = np.cumsum(self.p1_prev * self.d13 * scale1 + p2_prev * h3)
        p4 = np.cumsum(self.p1_prev * self.d14 * scale1 + p2_prev * h4)
        occ = np.column_stack([self.p1, p2, p3, p4])
        if np.any(occ < -OCCUPATION_EPS) or np.any(occ > 1 + OCCUPATION_EPS):
            raise OccupationOutOfRange("occupation probability outside [0, 1]", {"log_theta": log_theta})
        return occ


def model_control_cif(hazards: Mapping, log_theta: float, t: float, cause: int = CANCER_DEATH) -> float:
    """Control-arm incidence of ``cause`` by ``t`` implied by screening-arm hazards.

    Propagates occupation of states 1-4 across the merged jump times; the
    2->3 increments are multiplied by exp(log_theta).
    """
    if cause not in (CANCER_DEATH, OTHER_DEATH):
        raise ValueError("cause must be 3 or 4")
    return ControlArmModel(hazards, t).cif(log_theta, cause)
