"""Dual reconstruction loss and the supervised binary objective.

The reconstruction loss is the sum of two per-set mean squared errors: one
over kept tokens, one over augmented-masked tokens. Intrinsically missing
positions contribute to neither term. Empty sets contribute 0 rather than
dividing by zero; the trainer guarantees the kept set is never empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .masking import MaskPlan


@dataclass
class LossReport:
    """Per-sample loss decomposition, exact at 64-bit (fsum accumulation)."""

    unmasked_term: float
    masked_term: float
    total: float
    n_kept: int
    n_masked: int
    n_missing: int


def loss_report(x_hat: np.ndarray, x: np.ndarray, plan: MaskPlan) -> LossReport:
    """Evaluate the dual loss for one sample.

    Sums are accumulated with math.fsum, whose result is the correctly
    rounded float64 sum independent of term order.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    diff2 = [(float(x_hat[i]) - float(x[i])) ** 2 for i in range(plan.length)]
    unmasked = math.fsum(diff2[i] for i in plan.kept) / plan.kept.size if plan.kept.size else 0.0
    masked = math.fsum(diff2[i] for i in plan.augmented) / plan.augmented.size if plan.augmented.size else 0.0
    return LossReport(
        unmasked_term=unmasked,
        masked_term=masked,
        total=unmasked + masked,
        n_kept=int(plan.kept.size),
        n_masked=int(plan.augmented.size),
        n_missing=int(plan.missing.size),
    )


def dual_reconstruction_loss(x_hat: Tensor, x: np.ndarray, plans: Sequence[MaskPlan]) -> tuple:
    """Batch loss tensor (mean of per-sample totals) plus per-sample reports.

    Realized as one weighted sum of squares: weight 1/(B*|kept_b|) on kept
    positions, 1/(B*|A_b|) on augmented positions, 0 on missing positions,
    which keeps each sample's contribution independent of batch padding.
    """
    batch = len(plans)
    x = np.asarray(x, dtype=np.float64)
    weights = np.zeros_like(x)
    for b, plan in enumerate(plans):
        if plan.kept.size:
            weights[b, plan.kept] = 1.0 / (batch * plan.kept.size)
        if plan.augmented.size:
            weights[b, plan.augmented] = 1.0 / (batch * plan.augmented.size)
    diff = ad.sub(x_hat, x)
    loss = ad.tsum(ad.mul(ad.mul(diff, diff), weights))
    reports = [loss_report(x_hat.data[b], x[b], plan) for b, plan in enumerate(plans)]
    return loss, reports


def bce_with_logits(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits, log-sum-exp stable.

    Uses the identity -[y log s(z) + (1-y) log(1-s(z))] = softplus(z) - y*z.
    """
    y = np.asarray(labels, dtype=np.float64)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be binary")
    per = ad.sub(ad.softplus(logits), ad.mul(logits, y))
    return ad.tmean(per)


def bce_value(logits: np.ndarray, labels: np.ndarray) -> float:
    """Plain-array counterpart of bce_with_logits for logging."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, z) - y * z))
