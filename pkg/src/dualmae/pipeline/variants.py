"""Input-design variants applied to a processed dataset.

  full                   identity
  zero_fill_vasopressor  unrecorded vasopressor slots become observed zeros
                         (the mask flips to recorded, values read 0.0)
  no_24h                 hourly vital/vasopressor slots collapse to a single
                         daily last-value slot per feature; the grid shrinks
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from ..errors import ConfigError
from .dataset import DatasetBundle

VARIANTS = ("full", "zero_fill_vasopressor", "no_24h")


def input_variant(bundle: DatasetBundle, variant: str) -> DatasetBundle:
    if variant == "full":
        return bundle
    if variant == "zero_fill_vasopressor":
        return _zero_fill_vasopressor(bundle)
    if variant == "no_24h":
        return _collapse_hourly(bundle)
    raise ConfigError(f"unknown input variant {variant!r}; expected one of {VARIANTS}")


def _zero_fill_vasopressor(bundle: DatasetBundle) -> DatasetBundle:
    vaso_cols = np.flatnonzero(bundle.slot_kind == "vasopressor")
    if vaso_cols.size == 0:
        return bundle
    x = bundle.x.copy()
    t = bundle.t.copy()
    m = bundle.m.copy()
    hour = np.array([int(tag[1:]) for tag in bundle.slot_tag[vaso_cols]])
    midpoint_stamp = np.round(23.5 - hour, 1)
    for col, stamp in zip(vaso_cols, midpoint_stamp):
        unrecorded = m[:, col] == 0
        x[unrecorded, col] = 0.0
        t[unrecorded, col] = stamp
        m[unrecorded, col] = 1
    out = replace(bundle, x=x, t=t, m=m)
    out.meta = {**bundle.meta, "variant": "zero_fill_vasopressor"}
    return out


def _collapse_hourly(bundle: DatasetBundle) -> DatasetBundle:
    keep_cols = []
    collapsed: dict = {}
    for i, kind in enumerate(bundle.slot_kind):
        if kind in ("vital", "vasopressor"):
            collapsed.setdefault(bundle.slot_feature[i], []).append(i)
        else:
            keep_cols.append(i)

    n = bundle.n_samples
    new_cols = len(keep_cols) + len(collapsed)
    x = np.zeros((n, new_cols))
    t = np.zeros((n, new_cols))
    m = np.zeros((n, new_cols), dtype=np.uint8)
    feats, kinds, tags = [], [], []

    for j, i in enumerate(keep_cols):
        x[:, j] = bundle.x[:, i]
        t[:, j] = bundle.t[:, i]
        m[:, j] = bundle.m[:, i]
        feats.append(bundle.slot_feature[i])
        kinds.append(bundle.slot_kind[i])
        tags.append(bundle.slot_tag[i])

    for k, (feature, cols) in enumerate(collapsed.items()):
        j = len(keep_cols) + k
        cols = np.array(cols)
        sub_m = bundle.m[:, cols]
        # hourly slots hold the day's running last value, so the highest
        # observed hour is the daily last value with its original timestamp
        has = sub_m.any(axis=1)
        last = np.where(has, sub_m.shape[1] - 1 - np.argmax(sub_m[:, ::-1], axis=1), 0)
        rows = np.arange(n)
        x[has, j] = bundle.x[rows[has], cols[last[has]]]
        t[has, j] = bundle.t[rows[has], cols[last[has]]]
        m[has, j] = 1
        feats.append(feature)
        kinds.append(bundle.slot_kind[cols[0]])
        tags.append("day")

    out = replace(
        bundle,
        x=x, t=t, m=m,
        slot_feature=np.array(feats), slot_kind=np.array(kinds), slot_tag=np.array(tags),
    )
    out.meta = {**bundle.meta, "variant": "no_24h"}
    return out
