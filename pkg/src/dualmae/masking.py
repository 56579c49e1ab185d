"""Dual-mask algebra: intrinsic missingness, augmented masking, batch padding.

Index-set vocabulary used throughout the package, for a grid of length L:

  R     recorded positions (intrinsic mask m = 1)
  M     missing positions (m = 0); never masked further, never in any loss
  A     augmented-masked positions, sampled from R during training
  R\\A   kept positions - the only grid tokens the encoder ever sees

``{kept, A, M}`` always partitions ``{0..L-1}``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class MaskError(ValueError):
    """Raised on malformed masks or policies."""


@dataclass
class IntrinsicMask:
    """Binary record/missing indicator for one sample."""

    m: np.ndarray  # uint8 vector, 1 = recorded

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.uint8)
        if self.m.ndim != 1:
            raise MaskError(f"intrinsic mask must be a vector, got shape {self.m.shape}")

    @property
    def length(self) -> int:
        return self.m.shape[0]

    @property
    def recorded(self) -> np.ndarray:
        """Index set R."""
        return np.flatnonzero(self.m == 1)

    @property
    def missing(self) -> np.ndarray:
        """Index set M."""
        return np.flatnonzero(self.m == 0)


@dataclass
class MaskPlan:
    """Augmented mask m' over one sample's recorded positions."""

    m: np.ndarray        # intrinsic mask
    m_prime: np.ndarray  # 1 = kept; only meaningful where m = 1
    kept: np.ndarray = field(init=False)
    augmented: np.ndarray = field(init=False)
    missing: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.asarray(self.m, dtype=np.uint8)
        self.m_prime = np.asarray(self.m_prime, dtype=np.uint8)
        if self.m.shape != self.m_prime.shape:
            raise MaskError("intrinsic and augmented masks differ in length")
        self.kept = np.flatnonzero((self.m == 1) & (self.m_prime == 1))
        self.augmented = np.flatnonzero((self.m == 1) & (self.m_prime == 0))
        self.missing = np.flatnonzero(self.m == 0)

    @property
    def length(self) -> int:
        return self.m.shape[0]


def derive_intrinsic_mask(values: Sequence) -> IntrinsicMask:
    """Mark positions holding an actual value (not None / NaN) as recorded."""
    m = np.zeros(len(values), dtype=np.uint8)
    for i, v in enumerate(values):
        if v is None:
            continue
        v = float(v)
        if not np.isnan(v):
            m[i] = 1
    return IntrinsicMask(m)


@dataclass
class MaskPolicy:
    """Missing-rate-proportional augmented masking.

    ``a`` sets the resampling direction (positive favors masking the
    frequently missing columns), ``b`` is the base rate that the log-odds
    term is offset by. ``a = 0`` is plain uniform masking at rate ``b``.
    """

    a: float
    b: float

    def __post_init__(self):
        if not (0.0 < self.b < 1.0):
            raise MaskError(f"base mask rate b must lie in (0, 1), got {self.b}")

    def weights(self, p_miss: np.ndarray) -> np.ndarray:
        return logit_weights(p_miss, self.a, self.b)


def logit_weights(p_miss: np.ndarray, a: float, b: float) -> np.ndarray:
    """Per-column mask probability w = clamp(a * log(p/(1-p)) + b, 0, 1).

    Columns that are never observed (p = 1) get weight 0 - there is nothing
    recorded to mask. With a = 0 every column gets the uniform rate b.
    """
    p = np.asarray(p_miss, dtype=np.float64)
    if ((p < 0.0) | (p > 1.0)).any():
        raise MaskError("missing rates must lie in [0, 1]")
    if a == 0.0:
        w = np.full(p.shape, float(b))
    else:
        with np.errstate(divide="ignore"):
            w = a * (np.log(p) - np.log1p(-p)) + b
        w = np.clip(w, 0.0, 1.0)
    w = np.where(p == 1.0, 0.0, w)
    return w


def sample_augmented_mask(
    mask: IntrinsicMask, weights: np.ndarray, rng: np.random.Generator
) -> MaskPlan:
    """Independently hide each recorded position i with probability weights[i]."""
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (mask.length,):
        raise MaskError(f"weight vector length {w.shape} does not match grid {mask.length}")
    draw = rng.random(mask.length)
    hide = (draw < w) & (mask.m == 1)
    m_prime = np.where(hide, 0, 1).astype(np.uint8)
    return MaskPlan(mask.m, m_prime)


def sample_training_plan(
    mask: IntrinsicMask, weights: np.ndarray, rng: np.random.Generator
) -> MaskPlan:
    """Sampling wrapper that guarantees a non-empty kept set.

    If every recorded token was hidden, resample once; if that also empties
    the kept set, force-keep the recorded position with the largest weight so
    the encoder always receives at least one real token.
    """
    plan = sample_augmented_mask(mask, weights, rng)
    if plan.kept.size or not plan.augmented.size:
        return plan
    plan = sample_augmented_mask(mask, weights, rng)
    if plan.kept.size or not plan.augmented.size:
        return plan
    recorded = mask.recorded
    forced = recorded[np.argmax(np.asarray(weights)[recorded])]
    m_prime = plan.m_prime.copy()
    m_prime[forced] = 1
    return MaskPlan(mask.m, m_prime)


def keep_all_plan(mask: IntrinsicMask) -> MaskPlan:
    """Plan with no augmented masking (fine-tuning, probing, evaluation)."""
    return MaskPlan(mask.m, np.ones(mask.length, dtype=np.uint8))


@dataclass
class PaddedBatch:
    """Encoder layout for a batch of variable-length kept sets.

    Slot 0 of every sample is the CLS summary token; slots 1..l_keep hold the
    kept grid tokens, right-padded with the learnable pad token. ``gamma``
    blocks all attention to and from pad slots.
    """

    kept_idx: np.ndarray  # (B, l_keep) grid positions, -1 = pad
    gamma: np.ndarray     # (B, 1, S, S) binary, S = l_keep + 1
    lengths: np.ndarray   # (B,) kept-token counts, CLS excluded
    l_keep: int
    plans: list
    tokens: Optional[object] = None  # embedded (B, S, d) Tensor, attached by the model

    @property
    def seq_len(self) -> int:
        return self.l_keep + 1


def build_padded_batch(plans: Sequence[MaskPlan]) -> PaddedBatch:
    """Crop/pad a batch of plans to the batch-maximum kept length."""
    if len(plans) == 0:
        raise MaskError("cannot pad an empty batch")
    lengths = np.array([p.kept.size for p in plans], dtype=np.int64)
    if (lengths == 0).any():
        raise MaskError("every sample must keep at least one token (lab-free rows are discarded upstream)")
    l_keep = int(lengths.max())
    batch = len(plans)
    kept_idx = np.full((batch, l_keep), -1, dtype=np.int64)
    for b, plan in enumerate(plans):
        kept_idx[b, : plan.kept.size] = plan.kept
    seq = l_keep + 1
    gamma = np.zeros((batch, 1, seq, seq), dtype=np.float64)
    for b, n in enumerate(lengths):
        gamma[b, 0, : n + 1, : n + 1] = 1.0
    return PaddedBatch(kept_idx=kept_idx, gamma=gamma, lengths=lengths, l_keep=l_keep, plans=list(plans))
