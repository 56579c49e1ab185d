"""Winsorization and min-max normalization, fit on the training split only."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import DataError


@dataclass
class FeatureStats:
    """Per-feature clamp bounds and min-max range, all from training data."""

    p05: float
    p95: float
    vmin: float
    vmax: float
    constant: bool
    degenerate: bool  # fewer than two observations seen at fit time

    def to_dict(self) -> dict:
        return {
            "p05": self.p05, "p95": self.p95,
            "vmin": self.vmin, "vmax": self.vmax,
            "constant": self.constant, "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureStats":
        return cls(**d)


def winsorize_fit(values: np.ndarray) -> tuple:
    """5th/95th percentiles via the linear-interpolation empirical quantile."""
    values = np.asarray(values, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise DataError("cannot fit winsorization bounds on an empty feature")
    p05 = float(np.quantile(values, 0.05))
    p95 = float(np.quantile(values, 0.95))
    return p05, p95


def winsorize_apply(values, p05: float, p95: float):
    return np.clip(values, p05, p95)


def fit_feature_stats(train_values: np.ndarray) -> FeatureStats:
    """Winsorize then min-max, in that order, on the training values."""
    values = np.asarray(train_values, dtype=np.float64)
    values = values[np.isfinite(values)]
    degenerate = values.size < 2
    if values.size == 0:
        return FeatureStats(math.nan, math.nan, math.nan, math.nan, constant=True, degenerate=True)
    p05, p95 = winsorize_fit(values)
    clamped = winsorize_apply(values, p05, p95)
    vmin = float(clamped.min())
    vmax = float(clamped.max())
    constant = vmax == vmin
    return FeatureStats(p05, p95, vmin, vmax, constant=constant, degenerate=degenerate)


def normalize_apply(values, stats: FeatureStats):
    """Clamp to the winsorization bounds, then scale to [0, 1].

    Constant features map to 0.0 (kept at the distribution floor) and are
    flagged in the stats.
    """
    values = np.asarray(values, dtype=np.float64)
    if stats.constant or not np.isfinite(stats.vmin):
        return np.zeros_like(values)
    clamped = winsorize_apply(values, stats.p05, stats.p95)
    return (clamped - stats.vmin) / (stats.vmax - stats.vmin)


def denormalize(values, stats: FeatureStats):
    values = np.asarray(values, dtype=np.float64)
    if stats.constant or not np.isfinite(stats.vmin):
        return np.full_like(values, stats.vmin)
    return values * (stats.vmax - stats.vmin) + stats.vmin
