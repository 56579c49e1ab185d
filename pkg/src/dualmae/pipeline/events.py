"""Event stream ingestion.

The event CSV carries one measurement per row with the fixed header
``subject_id,stay_id,feature_id,time,value``. `time` is either epoch-minutes
(numeric) or ISO-8601, selected by config. Feature ids are resolved through
the registry's alias table (unit conversions applied there); events for
unknown features are dropped with a count, and negative vasopressor doses are
quarantined as data-quality failures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from ..errors import DataError
from .registry import FeatureRegistry

log = logging.getLogger(__name__)

EVENT_COLUMNS = ["subject_id", "stay_id", "feature_id", "time", "value"]
TIME_FORMATS = ("epoch_minutes", "iso8601")


@dataclass
class EventRecord:
    subject_id: str
    stay_id: str
    feature_id: str
    time_min: float
    value: float
    kind: str


@dataclass
class IngestReport:
    n_events: int
    n_unknown_feature: int
    n_quarantined: int


def parse_time_column(series: pd.Series, time_format: str) -> np.ndarray:
    if time_format == "epoch_minutes":
        out = pd.to_numeric(series, errors="coerce").to_numpy(dtype=np.float64)
    elif time_format == "iso8601":
        stamps = pd.to_datetime(series, errors="coerce", format="ISO8601")
        out = stamps.astype("int64").to_numpy(dtype=np.float64) / 60e9
        out[stamps.isna().to_numpy()] = np.nan
    else:
        raise DataError(f"time format must be one of {TIME_FORMATS}, got {time_format!r}")
    return out


def read_events(path, registry: FeatureRegistry, time_format: str = "epoch_minutes"):
    """Load, validate, and canonicalize an event CSV.

    Returns (DataFrame[subject_id, stay_id, feature, kind, role, time_min,
    value], IngestReport). The frame is sorted by (subject, stay, time).
    """
    df = pd.read_csv(path, dtype={"subject_id": str, "stay_id": str, "feature_id": str})
    missing = [c for c in EVENT_COLUMNS if c not in df.columns]
    if missing:
        raise DataError(f"event file {path} lacks columns {missing}")

    time_min = parse_time_column(df["time"], time_format)
    if np.isnan(time_min).any():
        raise DataError(f"event file {path} has unparseable times under format {time_format}")
    values = pd.to_numeric(df["value"], errors="coerce").to_numpy(dtype=np.float64)
    if not np.isfinite(values).all():
        raise DataError(f"event file {path} has non-finite or non-numeric values")

    feature = np.empty(len(df), dtype=object)
    kind = np.empty(len(df), dtype=object)
    role = np.empty(len(df), dtype=object)
    keep = np.ones(len(df), dtype=bool)
    quarantine = np.zeros(len(df), dtype=bool)
    for i, raw in enumerate(df["feature_id"].to_numpy()):
        hit = registry.resolve(raw)
        if hit is None:
            keep[i] = False
            continue
        spec, convert = hit
        feature[i] = spec.id
        kind[i] = spec.kind
        role[i] = spec.role
        values[i] = convert(values[i])
        if spec.kind == "vasopressor" and values[i] < 0:
            quarantine[i] = True
    n_unknown = int((~keep).sum())
    n_quarantined = int(quarantine.sum())
    if n_unknown:
        log.warning("dropped %d events with feature ids absent from the registry", n_unknown)
    if n_quarantined:
        log.warning("quarantined %d vasopressor events with negative doses", n_quarantined)
    keep &= ~quarantine

    out = pd.DataFrame(
        {
            "subject_id": df["subject_id"].to_numpy()[keep],
            "stay_id": df["stay_id"].to_numpy()[keep],
            "feature": feature[keep],
            "kind": kind[keep],
            "role": role[keep],
            "time_min": time_min[keep],
            "value": values[keep],
        }
    )
    if (out["time_min"] < 0).any():
        raise DataError("negative event times are not supported")
    out = out.sort_values(["subject_id", "stay_id", "time_min"], kind="mergesort").reset_index(drop=True)
    report = IngestReport(
        n_events=len(out), n_unknown_feature=n_unknown, n_quarantined=n_quarantined
    )
    return out, report
