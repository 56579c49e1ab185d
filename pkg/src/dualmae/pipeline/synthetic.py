"""Synthetic event-stream generator with controlled correlation and missingness.

Values follow a low-rank factor model: features are grouped, each group
loads on one latent factor drawn per subject-day, so within-group pairs have
correlation close to loading^2. The binary outcome thresholds the first
factor of the admission day plus Gaussian noise. Per-feature missing rates
control whether a lab is drawn on a given day (or an hourly vital at a given
hour). Everything is a pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from ..errors import ConfigError
from ..rng import RunRng
from .registry import FeatureRegistry

MIN_PER_DAY = 1440


@dataclass
class SynthConfig:
    n_subjects: int = 200
    days_per_subject: int = 2
    n_labs: int = 8
    n_vitals: int = 0
    n_vasopressors: int = 0
    n_factors: int = 2
    factor_loading: float = 0.92
    missing_low: float = 0.07
    missing_high: float = 0.88
    missing_rates: list = field(default_factory=list)  # per-lab override
    vital_hour_missing: float = 0.85
    vaso_episode_prob: float = 0.35
    label_noise: float = 0.25
    day_corr: float = 0.0  # AR(1) persistence of factors across days
    seed: int = 0

    def __post_init__(self):
        if self.n_labs < 1:
            raise ConfigError("n_labs must be >= 1")
        if not (0.0 < self.factor_loading < 1.0):
            raise ConfigError("factor_loading must lie in (0, 1)")
        rates = self.missing_rates or []
        if rates and len(rates) != self.n_labs:
            raise ConfigError("missing_rates must list one rate per lab")
        for r in rates or [self.missing_low, self.missing_high]:
            if not (0.0 <= r < 1.0):
                raise ConfigError("missing rates must lie in [0, 1)")
        if not (-1.0 < self.day_corr < 1.0):
            raise ConfigError("day_corr must lie in (-1, 1)")

    def lab_missing_rates(self) -> np.ndarray:
        if self.missing_rates:
            return np.asarray(self.missing_rates, dtype=np.float64)
        if self.n_labs == 1:
            return np.array([self.missing_low])
        return np.linspace(self.missing_low, self.missing_high, self.n_labs)

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects, "days_per_subject": self.days_per_subject,
            "n_labs": self.n_labs, "n_vitals": self.n_vitals,
            "n_vasopressors": self.n_vasopressors, "n_factors": self.n_factors,
            "factor_loading": self.factor_loading,
            "missing_low": self.missing_low, "missing_high": self.missing_high,
            "missing_rates": list(self.missing_rates),
            "vital_hour_missing": self.vital_hour_missing,
            "vaso_episode_prob": self.vaso_episode_prob,
            "label_noise": self.label_noise, "day_corr": self.day_corr,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown synth config keys: {sorted(extra)}")
        return cls(**d)


def synth_registry(config: SynthConfig) -> FeatureRegistry:
    features = []
    for j in range(config.n_labs):
        features.append({"id": f"lab_{j:02d}", "kind": "lab", "panel": f"group{j % config.n_factors}"})
    for j in range(config.n_vitals):
        features.append({"id": f"vital_{j:02d}", "kind": "vital"})
    roles = ["ne", "vasopressin", "epi", "dopamine", "phenylephrine"]
    for j in range(config.n_vasopressors):
        features.append({"id": f"vaso_{j:02d}", "kind": "vasopressor", "role": roles[j % len(roles)]})
    return FeatureRegistry.from_dict({"version": 1, "features": features})


def _feature_slope(rng: np.random.Generator, count: int) -> tuple:
    scale = rng.uniform(0.5, 3.0, count)
    offset = rng.uniform(-5.0, 5.0, count)
    return scale, offset


def generate(config: SynthConfig):
    """Produce (events DataFrame, labels DataFrame, registry).

    Event times are epoch-minutes; subject s is admitted at the start of day
    s * (days_per_subject + 1), so admission order follows subject index and
    a time-based split cut is easy to place.
    """
    run = RunRng(config.seed)
    registry = synth_registry(config)
    lab_rates = config.lab_missing_rates()
    n_features = config.n_labs + config.n_vitals
    groups = np.arange(n_features) % config.n_factors
    load = config.factor_loading
    noise_scale = np.sqrt(1.0 - load * load)

    value_rng = run.stream("values")
    scale, offset = _feature_slope(run.stream("feature-affine"), n_features)
    miss_rng = run.stream("missing")
    time_rng = run.stream("times")
    label_rng = run.stream("labels")
    vaso_rng = run.stream("vaso")

    records = []
    labels = []
    for s in range(config.n_subjects):
        subject = f"s{s:05d}"
        stay = f"{subject}-a"
        adm_day = s * (config.days_per_subject + 1)
        factors = value_rng.normal(0.0, 1.0, (config.days_per_subject, config.n_factors))
        if config.day_corr != 0.0:
            rho = config.day_corr
            blend = np.sqrt(1.0 - rho * rho)
            for d in range(1, config.days_per_subject):
                factors[d] = rho * factors[d - 1] + blend * factors[d]
        label = int(factors[0, 0] + label_rng.normal(0.0, config.label_noise) > 0.0)
        labels.append({"subject_id": subject, "stay_id": stay, "outcome": label})
        for d in range(config.days_per_subject):
            day_start = (adm_day + d) * MIN_PER_DAY
            eps = value_rng.normal(0.0, 1.0, n_features)
            latent = load * factors[d, groups] + noise_scale * eps
            raw = offset + scale * latent
            for j in range(config.n_labs):
                if miss_rng.random() < lab_rates[j]:
                    continue
                minute = day_start + time_rng.uniform(0.0, MIN_PER_DAY)
                records.append((subject, stay, f"lab_{j:02d}", round(minute, 1), raw[j]))
            for j in range(config.n_vitals):
                fid = f"vital_{j:02d}"
                base = raw[config.n_labs + j]
                for h in range(24):
                    if miss_rng.random() < config.vital_hour_missing:
                        continue
                    minute = day_start + h * 60 + time_rng.uniform(0.0, 60.0)
                    jitter = value_rng.normal(0.0, 0.05 * scale[config.n_labs + j])
                    records.append((subject, stay, fid, round(minute, 1), base + jitter))
            for j in range(config.n_vasopressors):
                if vaso_rng.random() > config.vaso_episode_prob:
                    continue
                fid = f"vaso_{j:02d}"
                start = day_start + vaso_rng.uniform(0.0, MIN_PER_DAY - 180.0)
                duration = vaso_rng.uniform(120.0, 480.0)
                rate = float(np.log1p(np.exp(factors[d, min(1, config.n_factors - 1)])) * 0.1)
                records.append((subject, stay, fid, round(start, 1), rate))
                records.append((subject, stay, fid, round(start + duration, 1), 0.0))

    events = pd.DataFrame(records, columns=["subject_id", "stay_id", "feature_id", "time", "value"])
    events = events.sort_values(["subject_id", "stay_id", "time"], kind="mergesort").reset_index(drop=True)
    labels = pd.DataFrame(labels)
    return events, labels, registry


def default_cut_time(config: SynthConfig, train_fraction: float = 0.8) -> float:
    """Cut placed so roughly `train_fraction` of subjects land before it."""
    cut_subject = int(round(train_fraction * config.n_subjects))
    return float(cut_subject * (config.days_per_subject + 1) * MIN_PER_DAY)


def write_synth_outputs(config: SynthConfig, out_dir) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    events, labels, registry = generate(config)
    events_path = out_dir / "events.csv"
    labels_path = out_dir / "labels.csv"
    registry_path = out_dir / "registry.json"
    events.to_csv(events_path, index=False)
    labels.to_csv(labels_path, index=False)
    registry.save(registry_path)
    (out_dir / "synth_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return {
        "events": events_path,
        "labels": labels_path,
        "registry": registry_path,
        "n_events": len(events),
        "n_stays": int(labels.shape[0]),
    }
