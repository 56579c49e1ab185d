"""Daily-grid construction from irregular event streams.

Each ICU stay becomes one row per calendar day that contains at least one
laboratory result (lab-free days carry too little signal and are discarded):

  * lab slots take the last result of the day; every lab also has a
    reference slot holding the most recent result from before the day;
  * vital slots are hourly, filled with the last observation up to the end
    of each hour within the day;
  * vasopressor doses are carried forward from each recorded rate until the
    next record (or the end of the stay), folded across drugs into a single
    norepinephrine-equivalent hourly feature stamped at hour midpoints.

Timestamps encode recency as hours before the row's midnight, rounded to
0.1 h: a value recorded at 21:00 is 3.0, a reference taken 20:30 the
previous day is 27.5.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..errors import DataError
from .registry import NE_EQ_FEATURE, FeatureRegistry

log = logging.getLogger(__name__)

MIN_PER_DAY = 1440.0

NE_COEFF = {
    "ne": 1.0,
    "epi": 1.0,
    "dopamine": 1.0 / 150.0,
    "phenylephrine": 1.0 / 10.0,
    "vasopressin": 2.5,
}


def ne_equivalent(ne=None, epi=None, dop=None, phen=None, vaso=None):
    """Norepinephrine-equivalent dose: NE + Epi + Dop/150 + Phen/10 + 2.5*Vas.

    Unrecorded drugs count as zero provided at least one drug is recorded;
    with every input missing the result is missing (None). Negative doses are
    data-quality failures.
    """
    doses = (ne, epi, dop, phen, vaso)
    if all(d is None for d in doses):
        return None
    clean = [0.0 if d is None else float(d) for d in doses]
    if any(d < 0 for d in clean):
        raise DataError(f"negative vasopressor dose in {doses}")
    ne_v, epi_v, dop_v, phen_v, vaso_v = clean
    return ne_v + epi_v + dop_v / 150.0 + phen_v / 10.0 + 2.5 * vaso_v


def hours_before_midnight(time_min: float, day_end_min: float) -> float:
    return float(np.round((day_end_min - time_min) / 60.0, 1))


@dataclass
class DayRow:
    subject_id: str
    stay_id: str
    day: int
    day_index: int
    admission_min: float
    values: np.ndarray  # (L,) raw values, NaN where missing
    times: np.ndarray   # (L,) hours-before-midnight, NaN where missing


def _positive_intervals(times: np.ndarray, rates: np.ndarray, stay_end: float):
    """Carry each recorded dosage forward to the next record or stay end."""
    order = np.argsort(times, kind="stable")
    times, rates = times[order], rates[order]
    dup = np.flatnonzero(np.diff(times) == 0)
    if dup.size:
        log.warning("overlapping vasopressor records at %d timestamps; later record wins", dup.size)
        keep = np.ones(times.size, dtype=bool)
        keep[dup] = False  # stable sort keeps file order, so the later row survives
        times, rates = times[keep], rates[keep]
    intervals = []
    for i, (t, r) in enumerate(zip(times, rates)):
        if r <= 0:
            continue
        end = times[i + 1] if i + 1 < times.size else stay_end
        if end > t:
            intervals.append((float(t), float(end), float(r)))
    return intervals


def build_daily_grid(stay_events: pd.DataFrame, registry: FeatureRegistry) -> list:
    """Grid one stay's events into per-day rows (lab-free days dropped)."""
    if stay_events.empty:
        return []
    slots = registry.slots()
    slot_index = {(s.feature, s.tag): i for i, s in enumerate(slots)}
    length = len(slots)
    subject = stay_events["subject_id"].iloc[0]
    stay = stay_events["stay_id"].iloc[0]
    admission = float(stay_events["time_min"].min())
    stay_end = float(stay_events["time_min"].max())

    by_feature = {
        fid: frame.sort_values("time_min", kind="mergesort")
        for fid, frame in stay_events.groupby("feature")
    }

    lab_days = set()
    for f in registry.labs:
        frame = by_feature.get(f.id)
        if frame is not None:
            lab_days.update((frame["time_min"] // MIN_PER_DAY).astype(int))
    if not lab_days:
        return []

    drug_intervals = {}
    for f in registry.vasopressors:
        frame = by_feature.get(f.id)
        if frame is None:
            continue
        ivs = _positive_intervals(
            frame["time_min"].to_numpy(), frame["value"].to_numpy(), stay_end
        )
        if ivs:
            drug_intervals[f.role] = ivs

    rows = []
    first_day = int(admission // MIN_PER_DAY)
    for day in sorted(lab_days):
        day_start = day * MIN_PER_DAY
        day_end = day_start + MIN_PER_DAY
        values = np.full(length, np.nan)
        times = np.full(length, np.nan)

        for f in registry.labs:
            frame = by_feature.get(f.id)
            if frame is None:
                continue
            t = frame["time_min"].to_numpy()
            v = frame["value"].to_numpy()
            in_day = np.flatnonzero((t >= day_start) & (t < day_end))
            if in_day.size:
                last = in_day[-1]
                i = slot_index[(f.id, "day")]
                values[i] = v[last]
                times[i] = hours_before_midnight(t[last], day_end)
            before = np.flatnonzero(t < day_start)
            if before.size:
                last = before[-1]
                i = slot_index[(f.id, "ref")]
                values[i] = v[last]
                times[i] = hours_before_midnight(t[last], day_end)

        for f in registry.vitals:
            frame = by_feature.get(f.id)
            if frame is None:
                continue
            t = frame["time_min"].to_numpy()
            v = frame["value"].to_numpy()
            in_day = np.flatnonzero((t >= day_start) & (t < day_end))
            if not in_day.size:
                continue
            td, vd = t[in_day], v[in_day]
            for h in range(24):
                upto = np.searchsorted(td, day_start + (h + 1) * 60.0, side="left")
                if upto == 0:
                    continue
                i = slot_index[(f.id, f"h{h:02d}")]
                values[i] = vd[upto - 1]
                times[i] = hours_before_midnight(td[upto - 1], day_end)

        if drug_intervals:
            for h in range(24):
                bin_lo = day_start + h * 60.0
                bin_hi = bin_lo + 60.0
                doses = {}
                for role, ivs in drug_intervals.items():
                    active = [iv for iv in ivs if iv[0] < bin_hi and iv[1] > bin_lo]
                    if active:
                        doses[role] = active[-1][2]  # most recent overlapping dosage
                if doses:
                    i = slot_index[(NE_EQ_FEATURE, f"h{h:02d}")]
                    values[i] = ne_equivalent(
                        ne=doses.get("ne"),
                        epi=doses.get("epi"),
                        dop=doses.get("dopamine"),
                        phen=doses.get("phenylephrine"),
                        vaso=doses.get("vasopressin"),
                    )
                    times[i] = float(np.round(23.5 - h, 1))

        lab_slots = [slot_index[(f.id, "day")] for f in registry.labs]
        if not np.isfinite(values[lab_slots]).any():
            continue  # no laboratory measurement that day
        rows.append(
            DayRow(
                subject_id=subject,
                stay_id=stay,
                day=int(day),
                day_index=int(day - first_day),
                admission_min=admission,
                values=values,
                times=times,
            )
        )
    return rows


def build_all_grids(events: pd.DataFrame, registry: FeatureRegistry) -> list:
    """Grid every stay; stays are independent so order is (subject, stay)."""
    rows = []
    n_discarded = 0
    for (_, _), stay_frame in events.groupby(["subject_id", "stay_id"], sort=True):
        all_days = set((stay_frame["time_min"] // MIN_PER_DAY).astype(int))
        stay_rows = build_daily_grid(stay_frame, registry)
        n_discarded += len(all_days) - len(stay_rows)
        rows.extend(stay_rows)
    if n_discarded:
        log.info("discarded %d lab-free day rows", n_discarded)
    return rows
