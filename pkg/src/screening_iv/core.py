"""Domain types for the four-state screening-trial model.

States are numbered as in the usual screening-trial diagram:

    1 healthy / not yet detected
    2 early detected by screening
    3 cancer death (absorbing)
    4 other-cause death (absorbing)

Only the screening arm can visit state 2.  Hazards are indexed by time since
randomization throughout.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DetectAfterEvent,
    DetectInControlArm,
    DuplicateId,
    EventBeyondHorizon,
    NegativeTime,
    ValidationError,
)

SCREENING = 1
CONTROL = 0

CENSORED = 0
CANCER_DEATH = 3
OTHER_DEATH = 4


@dataclass(frozen=True, order=True)
class TransitionId:
    from_state: int
    to_state: int

    def __post_init__(self):
        if (self.from_state, self.to_state) not in _LEGAL:
            raise ValueError(f"illegal transition {self.from_state}->{self.to_state}")

    @classmethod
    def parse(cls, key) -> "TransitionId":
        """Accept ``"23"``, ``"2->3"``, ``(2, 3)`` or an existing id."""
        if isinstance(key, TransitionId):
            return key
        if isinstance(key, str):
            digits = [c for c in key if c.isdigit()]
            if len(digits) != 2:
                raise ValueError(f"cannot parse transition {key!r}")
            return cls(int(digits[0]), int(digits[1]))
        a, b = key
        return cls(int(a), int(b))

    @property
    def key(self) -> str:
        return f"{self.from_state}{self.to_state}"

    def __str__(self):
        return f"{self.from_state}->{self.to_state}"


_LEGAL = {(1, 2), (1, 3), (1, 4), (2, 3), (2, 4)}

T12 = TransitionId(1, 2)
T13 = TransitionId(1, 3)
T14 = TransitionId(1, 4)
T23 = TransitionId(2, 3)
T24 = TransitionId(2, 4)
ALL_TRANSITIONS = (T12, T13, T14, T23, T24)


@dataclass(frozen=True)
class HazardFn:
    """Constant or piecewise-constant hazard.

    ``breakpoints`` are the interior change points; ``rates[k]`` applies on
    ``[breakpoints[k-1], breakpoints[k])`` with the first interval starting at
    0 and the last one open-ended.  A constant hazard has no breakpoints.
    """

    rates: tuple
    breakpoints: tuple = ()
    multiplier: float = 1.0

    def __post_init__(self):
        rates = tuple(float(r) for r in self.rates)
        bps = tuple(float(b) for b in self.breakpoints)
        object.__setattr__(self, "rates", rates)
        object.__setattr__(self, "breakpoints", bps)
        object.__setattr__(self, "multiplier", float(self.multiplier))
        if len(rates) != len(bps) + 1:
            raise ValueError("need exactly one more rate than breakpoints")
        if any(not math.isfinite(r) or r < 0 for r in rates):
            raise ValueError("hazard rates must be finite and nonnegative")
        if any(b <= 0 or not math.isfinite(b) for b in bps):
            raise ValueError("breakpoints must be positive and finite")
        if any(b2 <= b1 for b1, b2 in zip(bps, bps[1:])):
            raise ValueError("breakpoints must be strictly increasing")
        if not math.isfinite(self.multiplier) or self.multiplier < 0:
            raise ValueError("multiplier must be nonnegative")

    @classmethod
    def constant(cls, rate: float, multiplier: float = 1.0) -> "HazardFn":
        return cls(rates=(rate,), multiplier=multiplier)

    @classmethod
    def piecewise(cls, breakpoints, rates, multiplier: float = 1.0) -> "HazardFn":
        """Build from interior breakpoints.

        A leading breakpoint at 0 is also accepted, in which case there is one
        rate per breakpoint (each breakpoint opens an interval).
        """
        bps = [float(b) for b in breakpoints]
        if bps and bps[0] == 0.0 and len(rates) == len(bps):
            bps = bps[1:]
        return cls(rates=tuple(rates), breakpoints=tuple(bps), multiplier=multiplier)

    @classmethod
    def zero(cls) -> "HazardFn":
        return cls.constant(0.0)

    @property
    def form(self) -> str:
        return "constant" if not self.breakpoints else "piecewise"

    @property
    def knots(self) -> np.ndarray:
        """Left end of every interval, starting with 0."""
        return np.concatenate(([0.0], np.asarray(self.breakpoints, dtype=float)))

    def scaled(self, factor: float) -> "HazardFn":
        return HazardFn(self.rates, self.breakpoints, self.multiplier * factor)

    def is_zero(self) -> bool:
        return self.multiplier == 0 or all(r == 0 for r in self.rates)

    def rate(self, t):
        """Hazard at ``t`` (right-continuous)."""
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.breakpoints, t, side="right")
        out = np.asarray(self.rates)[idx] * self.multiplier
        return out if out.ndim else float(out)

    def cumulative(self, t):
        """Closed-form integral of the hazard over ``[0, t]``."""
        t = np.asarray(t, dtype=float)
        knots = self.knots
        rates = np.asarray(self.rates)
        at_knots = np.concatenate(([0.0], np.cumsum(rates[:-1] * np.diff(knots))))
        idx = np.searchsorted(self.breakpoints, t, side="right")
        out = (at_knots[idx] + rates[idx] * (t - knots[idx])) * self.multiplier
        out = np.where(t <= 0, 0.0, out)
        return out if out.ndim else float(out)

    def to_json(self) -> dict:
        if self.form == "constant":
            doc = {"form": "constant", "rate": self.rates[0]}
        else:
            doc = {"form": "piecewise", "breakpoints": list(self.breakpoints), "rates": list(self.rates)}
        if self.multiplier != 1.0:
            doc["multiplier"] = self.multiplier
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "HazardFn":
        form = doc.get("form")
        mult = doc.get("multiplier", 1.0)
        if form == "constant":
            return cls.constant(doc["rate"], mult)
        if form == "piecewise":
            return cls.piecewise(doc["breakpoints"], doc["rates"], mult)
        raise ValueError(f"unknown hazard form {form!r}")


def cumulative_hazard(h: HazardFn, t: float) -> float:
    if t < 0:
        raise ValueError("t must be nonnegative")
    return float(h.cumulative(t))


@dataclass(frozen=True)
class IntensityModel:
    """Screening-arm transition hazards plus the delayed-treatment ratio.

    ``hazards`` holds the early-referral intensities; the delayed-referral
    2->3 hazard is ``theta`` times the early one and 2->4 is unchanged.
    Transitions missing from ``hazards`` have zero intensity.
    """

    hazards: Mapping
    theta: float = 1.0

    def __post_init__(self):
        parsed = {}
        for key, h in dict(self.hazards).items():
            tid = TransitionId.parse(key)
            if not isinstance(h, HazardFn):
                h = HazardFn.constant(float(h))
            parsed[tid] = h
        for tid in ALL_TRANSITIONS:
            parsed.setdefault(tid, HazardFn.zero())
        object.__setattr__(self, "hazards", dict(sorted(parsed.items())))
        if not (self.theta > 0 and math.isfinite(self.theta)):
            raise ValueError("theta must be positive and finite")

    @classmethod
    def constant_rates(cls, rates: Mapping, theta: float = 1.0) -> "IntensityModel":
        return cls({k: HazardFn.constant(v) for k, v in rates.items()}, theta)

    def hazard(self, transition) -> HazardFn:
        return self.hazards[TransitionId.parse(transition)]

    def post_detection(self, referral: int) -> tuple[HazardFn, HazardFn]:
        """(2->3, 2->4) hazards under early (1) or delayed (0) referral."""
        h23 = self.hazards[T23]
        if referral == 0:
            h23 = h23.scaled(self.theta)
        return h23, self.hazards[T24]

    def with_theta(self, theta: float) -> "IntensityModel":
        return IntensityModel(self.hazards, theta)

    def breakpoints(self) -> np.ndarray:
        pts = set()
        for h in self.hazards.values():
            pts.update(h.breakpoints)
        return np.array(sorted(pts), dtype=float)


@dataclass(frozen=True)
class SubjectRecord:
    id: int
    arm: int
    detect_time: float | None
    event_time: float
    event_type: int


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TrialDataset:
    """Columnar, validated collection of trial records.

    ``detect_time`` is NaN where no detection was observed.  Build through
    :func:`validate_dataset`; direct construction skips the checks.
    """

    ids: np.ndarray
    arm: np.ndarray
    detect_time: np.ndarray
    event_time: np.ndarray
    event_type: np.ndarray
    censor_horizon: float

    def __post_init__(self):
        object.__setattr__(self, "ids", _readonly(self.ids, np.int64))
        object.__setattr__(self, "arm", _readonly(self.arm, np.int8))
        object.__setattr__(self, "detect_time", _readonly(self.detect_time, float))
        object.__setattr__(self, "event_time", _readonly(self.event_time, float))
        object.__setattr__(self, "event_type", _readonly(self.event_type, np.int8))
        object.__setattr__(self, "censor_horizon", float(self.censor_horizon))

    def __len__(self):
        return self.ids.shape[0]

    def __eq__(self, other):
        if not isinstance(other, TrialDataset):
            return NotImplemented
        return (
            self.censor_horizon == other.censor_horizon
            and np.array_equal(self.ids, other.ids)
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.detect_time, other.detect_time, equal_nan=True)
            and np.array_equal(self.event_time, other.event_time)
            and np.array_equal(self.event_type, other.event_type)
        )

    __hash__ = None

    @property
    def detected(self) -> np.ndarray:
        return ~np.isnan(self.detect_time)

    @property
    def records(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(
                int(i), int(a), None if math.isnan(d) else float(d), float(e), int(k)
            )
            for i, a, d, e, k in zip(self.ids, self.arm, self.detect_time, self.event_time, self.event_type)
        ]

    def take(self, index) -> "TrialDataset":
        """Rows at ``index`` (e.g. a bootstrap resample), renumbered 0..m-1.

        Resampled rows keep every per-record invariant, so no revalidation is
        needed; ids are renumbered to stay unique.
        """
        index = np.asarray(index)
        return TrialDataset(
            np.arange(index.shape[0]),
            self.arm[index],
            self.detect_time[index],
            self.event_time[index],
            self.event_type[index],
            self.censor_horizon,
        )

    def arm_subset(self, arm: int) -> "TrialDataset":
        return self.take(np.flatnonzero(self.arm == arm))

    def summary(self) -> dict:
        out = {"n": len(self), "censor_horizon": self.censor_horizon}
        for arm, name in ((SCREENING, "screening"), (CONTROL, "control")):
            m = self.arm == arm
            out[name] = {
                "n": int(m.sum()),
                "detections": int((m & self.detected).sum()),
                "cancer_deaths": int((m & (self.event_type == CANCER_DEATH)).sum()),
                "other_deaths": int((m & (self.event_type == OTHER_DEATH)).sum()),
                "censored": int((m & (self.event_type == CENSORED)).sum()),
            }
        return out


def _as_columns(records):
    ids, arm, det, ev, typ = [], [], [], [], []
    for r in records:
        if isinstance(r, Mapping):
            d = r.get("detect_time", r.get("detect"))
            ids.append(r["id"])
            arm.append(r["arm"])
            det.append(np.nan if d is None or d == "" else float(d))
            ev.append(float(r.get("event_time", r.get("event"))))
            typ.append(int(r.get("event_type", r.get("type"))))
        else:
            ids.append(r.id)
            arm.append(r.arm)
            det.append(np.nan if r.detect_time is None else float(r.detect_time))
            ev.append(float(r.event_time))
            typ.append(int(r.event_type))
    return (
        np.asarray(ids, dtype=np.int64),
        np.asarray(arm, dtype=np.int64),
        np.asarray(det, dtype=float),
        np.asarray(ev, dtype=float),
        np.asarray(typ, dtype=np.int64),
    )


def validate_dataset(records, censor_horizon: float | None = None) -> TrialDataset:
    """Check every record invariant and return a :class:`TrialDataset`.

    ``records`` may be a sequence of :class:`SubjectRecord`, a sequence of
    mappings with the CSV column names, or an existing dataset.  The first
    violating record (in input order) is reported.
    """
    if isinstance(records, TrialDataset):
        if censor_horizon is None:
            censor_horizon = records.censor_horizon
        ids, arm, det, ev, typ = (
            records.ids, records.arm.astype(np.int64), records.detect_time,
            records.event_time, records.event_type.astype(np.int64),
        )
    else:
        ids, arm, det, ev, typ = _as_columns(records)
    if censor_horizon is None or not (censor_horizon > 0 and math.isfinite(censor_horizon)):
        raise ValidationError("censor_horizon must be a positive finite time")

    has_det = ~np.isnan(det)
    checks = [
        (~np.isin(arm, (CONTROL, SCREENING)), ValidationError, "arm must be 0 or 1"),
        (~np.isin(typ, (CENSORED, CANCER_DEATH, OTHER_DEATH)), ValidationError, "event_type must be 0, 3 or 4"),
        (~np.isfinite(ev) | (has_det & ~np.isfinite(det)), ValidationError, "times must be finite"),
        ((ev < 0) | (has_det & (det < 0)), NegativeTime, "negative time"),
        (has_det & (arm == CONTROL), DetectInControlArm, "detection recorded in the control arm"),
        (has_det & (det > ev), DetectAfterEvent, "detect_time after event_time"),
        (ev > censor_horizon, EventBeyondHorizon, "event_time beyond the censoring horizon"),
    ]
    _, first_pos = np.unique(ids, return_index=True)
    dup = np.ones(ids.shape[0], dtype=bool)
    dup[first_pos] = False
    checks.append((dup, DuplicateId, "duplicate id"))

    first_bad = None
    for mask, exc, msg in checks:
        hits = np.flatnonzero(mask)
        if hits.size and (first_bad is None or hits[0] < first_bad[0]):
            first_bad = (hits[0], exc, msg)
    if first_bad is not None:
        pos, exc, msg = first_bad
        rid = int(ids[pos])
        raise exc(f"record id={rid}: {msg}", record_id=rid)

    return TrialDataset(ids, arm, det, ev, typ, censor_horizon)


# CSV ingestion contract

DATASET_COLUMNS = ("id", "arm", "detect_time", "event_time", "event_type")


def _fmt_time(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def dataset_to_csv(ds: TrialDataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DATASET_COLUMNS)
    for i, a, d, e, k in zip(ds.ids, ds.arm, ds.detect_time, ds.event_time, ds.event_type):
        w.writerow((int(i), int(a), _fmt_time(d), _fmt_time(e), int(k)))
    return buf.getvalue()


def write_dataset(ds: TrialDataset, path) -> None:
    Path(path).write_text(dataset_to_csv(ds))


def parse_dataset_csv(text: str, censor_horizon: float | None = None) -> TrialDataset:
    """Parse the dataset CSV format.

    The format carries no horizon; when ``censor_horizon`` is omitted the
    largest event time is used (all subjects administratively censored there
    in the simulated data).
    """
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != list(DATASET_COLUMNS):
        raise ValidationError(f"dataset CSV header must be {','.join(DATASET_COLUMNS)}")
    rows = []
    for line_no, row in enumerate(reader, start=2):
        try:
            rows.append({
                "id": int(row["id"]),
                "arm": int(row["arm"]),
                "detect_time": None if row["detect_time"].strip() == "" else float(row["detect_time"]),
                "event_time": float(row["event_time"]),
                "event_type": int(row["event_type"]),
            })
        except (TypeError, ValueError, AttributeError) as exc:
            raise ValidationError(f"line {line_no}: malformed row ({exc})") from exc
    if not rows:
        raise ValidationError("dataset CSV has no records")
    if censor_horizon is None:
        censor_horizon = max(r["event_time"] for r in rows)
    return validate_dataset(rows, censor_horizon)


def read_dataset(path, censor_horizon: float | None = None) -> TrialDataset:
    return parse_dataset_csv(Path(path).read_text(), censor_horizon)


@dataclass(frozen=True, eq=False)
class HazardEstimate:
    """Step-function cumulative hazard: jump times and their increments."""

    jump_times: np.ndarray
    increments: np.ndarray

    def __post_init__(self):
        jt = _readonly(self.jump_times, float)
        inc = _readonly(self.increments, float)
        if jt.shape != inc.shape:
            raise ValueError("jump_times and increments must have equal length")
        if jt.size > 1 and np.any(np.diff(jt) <= 0):
            raise ValueError("jump_times must be strictly increasing")
        if np.any(inc < 0):
            raise ValueError("increments must be nonnegative")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "increments", inc)

    @classmethod
    def empty(cls) -> "HazardEstimate":
        return cls(np.empty(0), np.empty(0))

    def __len__(self):
        return self.jump_times.shape[0]

    def cumulative(self, t):
        t = np.asarray(t, dtype=float)
        csum = np.concatenate(([0.0], np.cumsum(self.increments)))
        out = csum[np.searchsorted(self.jump_times, t, side="right")]
        return out if out.ndim else float(out)

    def truncated(self, t: float) -> "HazardEstimate":
        k = np.searchsorted(self.jump_times, t, side="right")
        return HazardEstimate(self.jump_times[:k], self.increments[:k])

    def scaled(self, factor: float) -> "HazardEstimate":
        return HazardEstimate(self.jump_times, self.increments * factor)

    def to_csv(self) -> str:
        lines = ["time,increment,cumulative"]
        for t, d, c in zip(self.jump_times, self.increments, np.cumsum(self.increments)):
            lines.append(f"{t:.6g},{d:.6g},{c:.6g}")
        return "\n".join(lines) + "\n"
