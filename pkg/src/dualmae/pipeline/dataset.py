"""Processed-dataset container: tokenized grids plus a verifiable manifest.

A dataset directory holds ``dataset.npz`` (the arrays) and
``manifest.json`` (registry, normalization stats, split definition, pipeline
version, and a content hash over the arrays). Loaders recompute the hash and
refuse silently modified artifacts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError
from .normalize import FeatureStats
from .registry import FeatureRegistry

PIPELINE_VERSION = 1

ARRAY_FIELDS = (
    "x", "t", "m", "split", "day_index", "admission_min",
    "subject_id", "stay_id", "labels",
    "slot_feature", "slot_kind", "slot_tag",
)


def hash_arrays(arrays: dict) -> str:
    digest = hashlib.sha256()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        digest.update(name.encode())
        digest.update(str(arr.dtype).encode())
        digest.update(str(arr.shape).encode())
        digest.update(arr.tobytes())
    return digest.hexdigest()


def hash_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


@dataclass
class DatasetBundle:
    x: np.ndarray            # (N, L) normalized values, 0.0 placeholder at missing
    t: np.ndarray            # (N, L) hours-before-midnight, 0.0 at missing
    m: np.ndarray            # (N, L) uint8 intrinsic mask
    split: np.ndarray        # (N,) 0 train / 1 val / 2 test
    day_index: np.ndarray    # (N,)
    admission_min: np.ndarray
    subject_id: np.ndarray   # (N,) str
    stay_id: np.ndarray      # (N,) str
    labels: np.ndarray       # (N, K) float, NaN where unlabeled
    label_names: list
    slot_feature: np.ndarray  # (L,) str
    slot_kind: np.ndarray
    slot_tag: np.ndarray
    stats: dict              # feature id -> FeatureStats
    registry: FeatureRegistry
    meta: dict = field(default_factory=dict)

    # basic views -----------------------------------------------------------
    @property
    def n_samples(self) -> int:
        return self.x.shape[0]

    @property
    def grid_len(self) -> int:
        return self.x.shape[1]

    def split_indices(self, split: int) -> np.ndarray:
        return np.flatnonzero(self.split == split)

    def label_column(self, task: str) -> np.ndarray:
        if task not in self.label_names:
            raise DataError(f"task {task!r} not among labels {self.label_names}")
        return self.labels[:, self.label_names.index(task)]

    def slot_missing_rates(self, indices: np.ndarray) -> np.ndarray:
        """Per-column missing rate over the given samples."""
        if len(indices) == 0:
            raise DataError("cannot estimate missing rates from zero samples")
        return 1.0 - self.m[indices].mean(axis=0)

    def feature_slots(self, feature: str) -> np.ndarray:
        return np.flatnonzero(self.slot_feature == feature)

    def column_names(self) -> list:
        return [f"{f}@{t}" for f, t in zip(self.slot_feature, self.slot_tag)]

    # persistence -----------------------------------------------------------
    def _arrays(self) -> dict:
        return {
            "x": self.x, "t": self.t, "m": self.m, "split": self.split,
            "day_index": self.day_index, "admission_min": self.admission_min,
            "subject_id": self.subject_id.astype(str), "stay_id": self.stay_id.astype(str),
            "labels": self.labels,
            "slot_feature": self.slot_feature.astype(str),
            "slot_kind": self.slot_kind.astype(str),
            "slot_tag": self.slot_tag.astype(str),
        }

    def content_hash(self) -> str:
        return hash_arrays(self._arrays())

    def manifest(self) -> dict:
        return {
            "kind": "dataset",
            "pipeline_version": PIPELINE_VERSION,
            "n_samples": int(self.n_samples),
            "grid_len": int(self.grid_len),
            "label_names": list(self.label_names),
            "registry": self.registry.to_dict(),
            "registry_hash": self.registry.content_hash(),
            "stats": {k: v.to_dict() for k, v in self.stats.items()},
            "dataset_hash": self.content_hash(),
            "meta": self.meta,
        }

    def save(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        np.savez(out_dir / "dataset.npz", **self._arrays())
        manifest = self.manifest()
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
        return out_dir

    @classmethod
    def load(cls, dataset_dir) -> "DatasetBundle":
        dataset_dir = Path(dataset_dir)
        manifest_path = dataset_dir / "manifest.json"
        npz_path = dataset_dir / "dataset.npz"
        if not manifest_path.exists():
            raise DataError(f"missing manifest: {manifest_path}")
        if not npz_path.exists():
            raise DataError(f"missing dataset arrays: {npz_path}")
        manifest = json.loads(manifest_path.read_text())
        with np.load(npz_path, allow_pickle=False) as payload:
            arrays = {name: payload[name] for name in payload.files}
        bundle = cls(
            x=arrays["x"], t=arrays["t"], m=arrays["m"].astype(np.uint8),
            split=arrays["split"], day_index=arrays["day_index"],
            admission_min=arrays["admission_min"],
            subject_id=arrays["subject_id"], stay_id=arrays["stay_id"],
            labels=arrays["labels"], label_names=list(manifest["label_names"]),
            slot_feature=arrays["slot_feature"], slot_kind=arrays["slot_kind"],
            slot_tag=arrays["slot_tag"],
            stats={k: FeatureStats.from_dict(v) for k, v in manifest["stats"].items()},
            registry=FeatureRegistry.from_dict(manifest["registry"]),
            meta=manifest.get("meta", {}),
        )
        recomputed = bundle.content_hash()
        if recomputed != manifest["dataset_hash"]:
            raise DataError(
                f"dataset content hash mismatch in {dataset_dir}: "
                f"manifest says {manifest['dataset_hash'][:12]}, arrays hash to {recomputed[:12]}"
            )
        return bundle
