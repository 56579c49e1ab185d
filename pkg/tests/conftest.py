"""Shared builders for small synthetic datasets and models."""

import io

import pytest

from dualmae.model import ModelConfig
from dualmae.pipeline import (
    SynthConfig,
    assemble_dataset,
    default_cut_time,
    generate,
    read_events,
)


def build_bundle(
    n_subjects=60,
    days_per_subject=2,
    n_labs=8,
    n_vitals=0,
    n_vasopressors=0,
    missing_low=0.1,
    missing_high=0.5,
    factor_loading=0.92,
    label_noise=0.25,
    seed=11,
    split_seed=0,
):
    cfg = SynthConfig(
        n_subjects=n_subjects, days_per_subject=days_per_subject,
        n_labs=n_labs, n_vitals=n_vitals, n_vasopressors=n_vasopressors,
        missing_low=missing_low, missing_high=missing_high,
        factor_loading=factor_loading, label_noise=label_noise, seed=seed,
    )
    events, labels, registry = generate(cfg)
    frame, _ = read_events(io.StringIO(events.to_csv(index=False)), registry)
    return assemble_dataset(
        frame, registry, labels=labels, cut_time=default_cut_time(cfg), seed=split_seed
    )


def toy_model_config(grid_len, d=16, enc_depth=2, dec_depth=1, heads=2):
    return ModelConfig(
        grid_len=grid_len, d_embed=d, enc_depth=enc_depth, enc_heads=heads,
        mlp_ratio=2.0, dec_embed=d, dec_depth=dec_depth, dec_heads=heads,
        head_hidden=8, head_dropout=0.1,
    )


@pytest.fixture(scope="session")
def small_bundle():
    return build_bundle()
