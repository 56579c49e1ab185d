"""End-to-end preprocessing: events -> grids -> stats -> normalized dataset."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from ..errors import DataError
from .dataset import DatasetBundle
from .grid import build_all_grids
from .normalize import fit_feature_stats, normalize_apply
from .registry import FeatureRegistry
from .splits import TRAIN, split_dataset

log = logging.getLogger(__name__)


def read_labels(path) -> pd.DataFrame:
    df = pd.read_csv(path, dtype={"subject_id": str, "stay_id": str})
    for col in ("subject_id", "stay_id"):
        if col not in df.columns:
            raise DataError(f"label file {path} lacks column {col}")
    tasks = [c for c in df.columns if c not in ("subject_id", "stay_id")]
    if not tasks:
        raise DataError(f"label file {path} declares no task columns")
    return df


def _stat_pool_slots(registry: FeatureRegistry) -> dict:
    """Feature id -> slot indices pooled when fitting normalization stats.

    Lab reference slots repeat earlier measurements, so only the day slots
    feed the lab statistics; the same stats normalize the reference slots.
    """
    slots = registry.slots()
    pools: dict = {}
    for i, slot in enumerate(slots):
        if slot.kind == "lab" and slot.tag == "ref":
            continue
        pools.setdefault(slot.feature, []).append(i)
    return {k: np.array(v) for k, v in pools.items()}


def assemble_dataset(
    events: pd.DataFrame,
    registry: FeatureRegistry,
    labels: Optional[pd.DataFrame] = None,
    cut_time: Optional[float] = None,
    cut_quantile: float = 0.8,
    val_fraction: float = 0.2,
    seed: int = 0,
    meta: Optional[dict] = None,
) -> DatasetBundle:
    rows = build_all_grids(events, registry)
    if not rows:
        raise DataError("no day rows survive preprocessing (no laboratory measurements?)")

    n = len(rows)
    slots = registry.slots()
    length = len(slots)
    raw = np.stack([r.values for r in rows])
    times = np.stack([r.times for r in rows])
    m = np.isfinite(raw).astype(np.uint8)
    subject_id = np.array([r.subject_id for r in rows])
    stay_id = np.array([r.stay_id for r in rows])
    day_index = np.array([r.day_index for r in rows], dtype=np.int64)
    admission = np.array([r.admission_min for r in rows], dtype=np.float64)

    if cut_time is None:
        stay_adm = pd.DataFrame({"stay": stay_id, "adm": admission}).groupby("stay")["adm"].first()
        cut_time = float(np.quantile(stay_adm.to_numpy(), cut_quantile))
    split = split_dataset(subject_id, admission, cut_time, val_fraction, seed)

    train_rows = np.flatnonzero(split == TRAIN)
    if train_rows.size == 0:
        raise DataError("empty training split; move the cut time later")
    pools = _stat_pool_slots(registry)
    stats = {}
    for feature, slot_idx in pools.items():
        pool = raw[np.ix_(train_rows, slot_idx)]
        observed = pool[np.isfinite(pool)]
        if observed.size == 0:
            log.warning("feature %s never observed in the training split", feature)
        stats[feature] = fit_feature_stats(observed) if observed.size else fit_feature_stats(np.array([np.nan]))
        if stats[feature].degenerate:
            log.warning("feature %s has degenerate stats (<2 observations); marked constant", feature)

    x = np.zeros_like(raw)
    for i, slot in enumerate(slots):
        st = stats[slot.feature]
        col = raw[:, i]
        observed = np.isfinite(col)
        x[observed, i] = normalize_apply(col[observed], st)
    t = np.where(m == 1, times, 0.0)

    if labels is not None:
        tasks = [c for c in labels.columns if c not in ("subject_id", "stay_id")]
        key = pd.DataFrame({"subject_id": subject_id, "stay_id": stay_id})
        joined = key.merge(labels, on=["subject_id", "stay_id"], how="left")
        label_arr = joined[tasks].to_numpy(dtype=np.float64)
    else:
        tasks = []
        label_arr = np.zeros((n, 0), dtype=np.float64)

    return DatasetBundle(
        x=x, t=t, m=m, split=split.astype(np.int8),
        day_index=day_index, admission_min=admission,
        subject_id=subject_id, stay_id=stay_id,
        labels=label_arr, label_names=tasks,
        slot_feature=np.array([s.feature for s in slots]),
        slot_kind=np.array([s.kind for s in slots]),
        slot_tag=np.array([s.tag for s in slots]),
        stats=stats, registry=registry,
        meta={"cut_time": cut_time, "val_fraction": val_fraction, "split_seed": seed,
              **(meta or {})},
    )
