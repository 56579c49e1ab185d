"""Deterministic random streams keyed by (seed, purpose tag).

All sampling in the package (initialization, augmented masks, shuffles,
dropout, synthetic data) draws from Philox counter-based generators derived
here, so a run is a pure function of its seed and every subsystem gets an
independent stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


class RunRng:
    """Factory for named Philox streams under one run seed."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def stream(self, tag: str) -> np.random.Generator:
        digest = hashlib.blake2b(
            f"{self.seed}/{tag}".encode("utf-8"), digest_size=16
        ).digest()
        key = int.from_bytes(digest, "little")
        return np.random.Generator(np.random.Philox(key=key))


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out
