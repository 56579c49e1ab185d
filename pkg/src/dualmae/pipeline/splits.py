"""Time-based train/validation/test split with subject-disjoint membership."""

from __future__ import annotations

import logging

import numpy as np

from ..errors import DataError
from ..rng import RunRng

log = logging.getLogger(__name__)

TRAIN, VAL, TEST = 0, 1, 2


def split_dataset(
    subject_ids: np.ndarray,
    admission_min: np.ndarray,
    cut_time: float,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> np.ndarray:
    """Assign each sample to train (0), val (1), or test (2).

    Admissions before `cut_time` form the train pool, later ones the test
    set; a subject admitted on both sides is assigned wholly to the earlier
    side. Validation takes `val_fraction` of the train-pool subjects. The
    three subject sets are pairwise disjoint by construction.
    """
    subject_ids = np.asarray(subject_ids)
    admission_min = np.asarray(admission_min, dtype=np.float64)
    if subject_ids.shape != admission_min.shape:
        raise DataError("subject/admission arrays disagree in length")

    earliest: dict = {}
    spanning = set()
    for sid, adm in zip(subject_ids, admission_min):
        prev = earliest.get(sid)
        if prev is None:
            earliest[sid] = adm
        else:
            if (prev < cut_time) != (adm < cut_time):
                spanning.add(sid)
            earliest[sid] = min(prev, adm)
    if spanning:
        log.warning(
            "%d subjects span the split cut; assigned wholly to the earlier side",
            len(spanning),
        )

    train_pool = sorted(sid for sid, adm in earliest.items() if adm < cut_time)
    test_subjects = {sid for sid, adm in earliest.items() if adm >= cut_time}
    if not test_subjects:
        log.warning("no admissions after the cut: the test split is empty")

    rng = RunRng(seed).stream("split/val")
    n_val = int(round(val_fraction * len(train_pool)))
    order = rng.permutation(len(train_pool))
    val_subjects = {train_pool[i] for i in order[:n_val]}

    out = np.empty(len(subject_ids), dtype=np.int8)
    for i, sid in enumerate(subject_ids):
        if sid in test_subjects:
            out[i] = TEST
        elif sid in val_subjects:
            out[i] = VAL
        else:
            out[i] = TRAIN
    return out
