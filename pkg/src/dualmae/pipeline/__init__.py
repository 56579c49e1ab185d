"""Event ingestion, daily grids, normalization, splits, synthesis, variants."""

from .build import assemble_dataset, read_labels
from .dataset import DatasetBundle, hash_arrays, hash_file
from .events import read_events
from .grid import build_all_grids, build_daily_grid, hours_before_midnight, ne_equivalent
from .normalize import (
    FeatureStats,
    denormalize,
    fit_feature_stats,
    normalize_apply,
    winsorize_apply,
    winsorize_fit,
)
from .registry import NE_EQ_FEATURE, FeatureRegistry, FeatureSpec, Slot
from .splits import TEST, TRAIN, VAL, split_dataset
from .synthetic import SynthConfig, default_cut_time, generate, synth_registry, write_synth_outputs
from .variants import VARIANTS, input_variant

__all__ = [
    "assemble_dataset", "read_labels", "DatasetBundle", "hash_arrays", "hash_file",
    "read_events", "build_all_grids", "build_daily_grid", "hours_before_midnight",
    "ne_equivalent", "FeatureStats", "denormalize", "fit_feature_stats",
    "normalize_apply", "winsorize_apply", "winsorize_fit", "NE_EQ_FEATURE",
    "FeatureRegistry", "FeatureSpec", "Slot", "TEST", "TRAIN", "VAL",
    "split_dataset", "SynthConfig", "default_cut_time", "generate",
    "synth_registry", "write_synth_outputs", "VARIANTS", "input_variant",
]
