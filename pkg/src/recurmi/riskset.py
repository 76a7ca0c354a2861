"""Analysis-row construction: strata labels and risk-interval layouts.

A subject with observed events ``t1 < ... < tE`` and censoring time ``c``
contributes one analysis row per event plus a trailing censored row when
``tE < c`` (a subject with no events contributes the single censored row).
Two layouts are supported:

* counting process: intervals ``(0, t1], (t1, t2], ..., (tE, c]`` on the
  shared follow-up clock;
* gap time: the same intervals re-zeroed, ``(0, t1], (0, t2 - t1], ...``.

Stratum labels carry the prior-risk flag ``r`` and, in Interaction mode,
the running episode number ``k = min(prior_count + j, k_cap)`` for the
subject's j-th observed interval.  SubpopOnly mode keeps only ``r``.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Optional, Sequence

from .errors import DataError, DomainError, SchemaError
from .simulate import Cohort, Subject

__all__ = [
    "StrataMode",
    "StratumLabel",
    "RiskRow",
    "assign_strata",
    "strata_for_cohort",
    "layout_counting_process",
    "layout_gap_time",
    "rows_to_csv",
    "rows_from_csv",
    "RISKSET_CSV_BASE_COLUMNS",
]


class StrataMode(Enum):
    INTERACTION = "interaction"
    SUBPOP_ONLY = "subpop_only"


@dataclass(frozen=True, order=True)
class StratumLabel:
    """Hashable stratum key: prior-risk flag ``r`` and episode ``k``.

    ``k`` is None in SubpopOnly mode.  The string form (``r1k3``, ``r0``)
    is what lands in CSV exports.
    """

    r: int
    k: Optional[int] = None

    def __post_init__(self):
        if self.r not in (0, 1):
            raise DomainError(f"r must be 0 or 1, got {self.r!r}")
        if self.k is not None and self.k < 1:
            raise DomainError(f"k must be >= 1, got {self.k!r}")

    def __str__(self) -> str:
        return f"r{self.r}" if self.k is None else f"r{self.r}k{self.k}"

    @classmethod
    def parse(cls, text: str) -> "StratumLabel":
        m = re.fullmatch(r"r([01])(?:k(\d+))?", text)
        if m is None:
            raise DataError(f"unparseable stratum label {text!r}")
        return cls(int(m.group(1)), int(m.group(2)) if m.group(2) else None)


@dataclass(frozen=True)
class RiskRow:
    """One at-risk interval ``(start, stop]`` with its event status."""

    subject_id: int
    start: float
    stop: float
    status: int
    stratum: StratumLabel
    x: tuple

    def __post_init__(self):
        if not (self.start >= 0 and self.stop > self.start):
            raise DomainError(
                f"need 0 <= start < stop, got ({self.start!r}, {self.stop!r}]"
            )
        if self.status not in (0, 1):
            raise DomainError(f"status must be 0 or 1, got {self.status!r}")


def _n_intervals(subject: Subject) -> int:
    e = len(subject.observed_events)
    if e and subject.observed_events[-1] >= subject.censor_time_days:
        return e  # zero-length trailing interval dropped
    return e + 1


def assign_strata(
    subject: Subject, imputed_prior: int, k_cap: int, mode: StrataMode
) -> list:
    """Stratum labels for the subject's analysis intervals, in order.

    In Interaction mode the j-th interval gets
    ``k = min(imputed_prior + j, k_cap)``; labels are monotone in j.
    """
    if imputed_prior < 0:
        raise DomainError(f"imputed_prior must be >= 0, got {imputed_prior!r}")
    if subject.prior_risk_days == 0 and imputed_prior != 0:
        raise DomainError(
            f"subject {subject.id} was never previously at risk but has "
            f"imputed_prior={imputed_prior}"
        )
    r = 1 if subject.prior_risk_days > 0 else 0
    n = _n_intervals(subject)
    if mode is StrataMode.SUBPOP_ONLY:
        return [StratumLabel(r)] * n
    return [StratumLabel(r, min(imputed_prior + j, k_cap)) for j in range(1, n + 1)]


def strata_for_cohort(
    cohort: Cohort,
    imputed_prior: Optional[Mapping[int, int]],
    k_cap: int,
    mode: StrataMode,
) -> dict:
    """Per-subject label lists keyed by subject id.

    ``imputed_prior`` maps subject id to a completed prior count; missing
    ids (or None for the whole mapping) count as 0.
    """
    imputed = imputed_prior or {}
    return {
        s.id: assign_strata(s, imputed.get(s.id, 0), k_cap, mode)
        for s in cohort.subjects
    }


def _subject_intervals(subject: Subject):
    bounds = [0.0, *subject.observed_events]
    out = [(a, b, 1) for a, b in zip(bounds, bounds[1:])]
    if bounds[-1] < subject.censor_time_days:
        out.append((bounds[-1], subject.censor_time_days, 0))
    return out


def _layout(cohort: Cohort, strata: Mapping[int, Sequence[StratumLabel]], gap: bool):
    rows = []
    for s in cohort.subjects:
        labels = strata[s.id]
        intervals = _subject_intervals(s)
        if len(labels) != len(intervals):
            raise DataError(
                f"subject {s.id}: {len(labels)} stratum labels for "
                f"{len(intervals)} intervals"
            )
        x = tuple(float(v) for v in s.x)
        for (a, b, status), lab in zip(intervals, labels):
            if gap:
                a, b = 0.0, b - a
            rows.append(RiskRow(s.id, a, b, status, lab, x))
    return rows


def layout_counting_process(cohort: Cohort, strata: Mapping) -> list:
    """Rows on the follow-up clock; a subject's rows tile ``(0, c]``."""
    return _layout(cohort, strata, gap=False)


def layout_gap_time(cohort: Cohort, strata: Mapping) -> list:
    """Rows re-zeroed per interval; every ``start`` is 0."""
    return _layout(cohort, strata, gap=True)


RISKSET_CSV_BASE_COLUMNS = ["id", "start", "stop", "status", "stratum"]


def _fmt(v: float) -> str:
    return repr(float(v))


def rows_to_csv(rows: Sequence[RiskRow], path) -> None:
    if not rows:
        raise DataError("no rows to write")
    p = len(rows[0].x)
    cols = RISKSET_CSV_BASE_COLUMNS + [f"x{i + 1}" for i in range(p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow(
                [r.subject_id, _fmt(r.start), _fmt(r.stop), r.status, str(r.stratum)]
                + [_fmt(v) for v in r.x]
            )


def rows_from_csv(path) -> list:
    """Read analysis rows, validating schema and per-row values.

    Raises SchemaError naming any missing column; value problems raise
    DataError with the offending line number (header is line 1).  Within a
    subject, two event rows sharing a stop time are rejected as duplicate
    event times.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        idx = {name: i for i, name in enumerate(header)}
        for col in RISKSET_CSV_BASE_COLUMNS:
            if col not in idx:
                raise SchemaError(f"{path}: missing column {col!r}")
        xcols = []
        while f"x{len(xcols) + 1}" in idx:
            xcols.append(idx[f"x{len(xcols) + 1}"])
        if not xcols:
            raise SchemaError(f"{path}: missing column 'x1'")

        rows = []
        seen_event_stops = {}
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(rec)}")
            try:
                sid = int(rec[idx["id"]])
                start = float(rec[idx["start"]])
                stop = float(rec[idx["stop"]])
                status = int(rec[idx["status"]])
                x = tuple(float(rec[i]) for i in xcols)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            stratum = StratumLabel.parse(rec[idx["stratum"]])
            try:
                row = RiskRow(sid, start, stop, status, stratum, x)
            except DomainError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if status == 1:
                key = (sid, stop)
                if key in seen_event_stops:
                    raise DataError(
                        f"{path}:{lineno}: duplicate event time {stop!r} for "
                        f"subject {sid} (first at line {seen_event_stops[key]})"
                    )
                seen_event_stops[key] = lineno
            rows.append(row)
    return rows
