"""Run configuration: one JSON document, command-line flags win.

Unknown keys are rejected everywhere so a typo cannot silently fall back to
a default. Every artifact-producing command echoes its resolved config into
the output manifest.
"""

from __future__ import annotations

import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS = {
    "seed": 0,
    "output_dir": None,
    "data": {
        "events": None,
        "labels": None,
        "registry": None,
        "time_format": "epoch_minutes",
        "cut_time": None,
        "cut_quantile": 0.8,
        "val_fraction": 0.2,
        "variant": "full",
    },
    "synth": {},  # validated by SynthConfig
    "model": {
        "d_embed": 64,
        "enc_depth": 8,
        "enc_heads": 8,
        "mlp_ratio": 4.0,
        "dec_embed": 64,
        "dec_depth": 4,
        "dec_heads": 4,
        "head_hidden": 32,
        "head_dropout": 0.1,
    },
    "masking": {"a": 0.0, "b": 0.25},
    "schedule": {
        "base_lr": 1e-3,
        "min_lr": 1e-5,
        "warmup_epochs": 20,
        "max_epochs": 400,
        "weight_decay": 0.05,
        "batch_size": 64,
        "grad_accum": 1,
        "nan_policy": "abort",
    },
    "finetune": {
        "enc_lr": 1e-5,
        "head_lr": 1e-3,
        "weight_decay": 1e-5,
        "batch_size": 128,
        "max_epochs": 100,
        "patience": 10,
    },
    "eval": {
        "task": None,
        "fractions": [1.0, 5.0, 10.0, 50.0, 100.0],
        "seeds": [2020, 2021, 2022, 2023, 2024],
        "c_reg": 1.0,
        "features": None,
        "panel": None,
        "ratios": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
        "baseline": False,
    },
    "sweep": {
        "grid_a": [0.0],
        "grid_b": [0.25],
        "variants": ["full"],
        "task": None,
        "probe_fractions": [100.0],
        "probe_seeds": [2020],
    },
}


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = dict(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {where}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, where)
        else:
            out[key] = value
    return out


def load_config(path=None, overrides=None) -> dict:
    """Defaults <- JSON file <- --set overrides, rejecting unknown keys."""
    config = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        # the synth section is free-form here; SynthConfig validates it
        synth = doc.pop("synth", None)
        config = _merge(config, doc)
        if synth is not None:
            config["synth"] = synth
    for item in overrides or []:
        config = apply_override(config, item)
    return config


def apply_override(config: dict, item: str) -> dict:
    """Apply one dotted key=value pair (value parsed as JSON when possible)."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    dotted, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    keys = dotted.split(".")
    node: dict = {}
    leaf = node
    for key in keys[:-1]:
        leaf[key] = {}
        leaf = leaf[key]
    leaf[keys[-1]] = value
    if keys[0] == "synth":
        synth = dict(config.get("synth", {}))
        target = synth
        for key in keys[1:-1]:
            target = target.setdefault(key, {})
        if len(keys) > 1:
            target[keys[-1]] = value
            return {**config, "synth": synth}
    return _merge(config, node)
