"""Metrics and evaluation protocols.

AUROC uses the rank (Mann-Whitney) estimator with half credit for ties;
AUPRC is step-interpolated average precision. The linear probe fits an
L2-regularized logistic regression natively (damped Newton iterations to a
1e-8 gradient norm) on frozen CLS embeddings, stratified-subsampled at the
configured label fractions over five seeds. Reconstruction evaluations hide
observed tokens (one at a time, by panel, or at random rates) and score the
decoder's predictions.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError
from .masking import IntrinsicMask, MaskPlan, keep_all_plan
from .model import ModelParams, cls_embeddings, reconstruct_batch
from .pipeline.dataset import DatasetBundle
from .pipeline.splits import TEST, TRAIN
from .rng import RunRng

log = logging.getLogger(__name__)


class MetricUndefined(ValueError):
    """Raised when a metric has no value on the given inputs."""


# ---------------------------------------------------------------------------
# ranking metrics
# ---------------------------------------------------------------------------

def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties averaged (dyadic halves, exact in float64)."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """P(random positive outranks random negative), ties counted half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefined("AUROC needs both classes present")
    ranks = _average_ranks(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average precision with step interpolation, thresholds grouped by score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    if n_pos == 0:
        raise MetricUndefined("AUPRC needs at least one positive")
    order = np.argsort(-scores, kind="mergesort")
    y = (labels[order] == 1).astype(np.float64)
    s = scores[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1.0 - y)
    # keep only the last row of each tied-score block
    last = np.flatnonzero(np.append(np.diff(s) != 0, True))
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def regression_metrics(pred: np.ndarray, truth: np.ndarray, value_range: float) -> tuple:
    """(NRMSE, NMAE, R^2) with errors normalized by the stated value range."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if value_range <= 0:
        raise MetricUndefined("value_range must be positive")
    if truth.size < 2:
        raise MetricUndefined("R^2 needs at least two points")
    err = pred - truth
    nrmse = float(np.sqrt(np.mean(err ** 2)) / value_range)
    nmae = float(np.mean(np.abs(err)) / value_range)
    ss_res = float(np.sum(err ** 2))
    ss_tot = float(np.sum((truth - truth.mean()) ** 2))
    if ss_tot == 0.0:
        raise MetricUndefined("R^2 undefined for zero-variance truth")
    return nrmse, nmae, 1.0 - ss_res / ss_tot


# ---------------------------------------------------------------------------
# native logistic regression (probe classifier)
# ---------------------------------------------------------------------------

@dataclass
class LogisticFit:
    weights: np.ndarray
    intercept: float
    converged: bool
    grad_norm: float
    n_iter: int

    def decision(self, features: np.ndarray) -> np.ndarray:
        return features @ self.weights + self.intercept


def fit_logistic(
    features: np.ndarray,
    labels: np.ndarray,
    c_reg: float = 1.0,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> LogisticFit:
    """Minimize mean BCE + ||w||^2 / (2 C n) by damped Newton iteration.

    The intercept is unpenalized. Convergence is certified by the Euclidean
    gradient norm dropping below `tol`.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise MetricUndefined("logistic fit needs both classes")
    n, d = x.shape
    xb = np.concatenate([x, np.ones((n, 1))], axis=1)
    beta = np.zeros(d + 1)
    reg = np.zeros(d + 1)
    reg[:d] = 1.0 / (c_reg * n)

    def objective(b):
        z = xb @ b
        return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * np.sum(reg * b * b))

    def gradient(b):
        z = xb @ b
        p = 1.0 / (1.0 + np.exp(-z))
        return xb.T @ (p - y) / n + reg * b

    grad = gradient(beta)
    n_iter = 0
    converged = float(np.linalg.norm(grad)) < tol
    while not converged and n_iter < max_iter:
        z = xb @ beta
        p = 1.0 / (1.0 + np.exp(-z))
        w = np.maximum(p * (1.0 - p), 1e-12)
        hess = (xb * w[:, None]).T @ xb / n + np.diag(reg)
        step = np.linalg.solve(hess, grad)
        base = objective(beta)
        scale = 1.0
        while scale > 1e-8 and objective(beta - scale * step) > base:
            scale *= 0.5
        beta = beta - scale * step
        grad = gradient(beta)
        n_iter += 1
        converged = float(np.linalg.norm(grad)) < tol
    if not converged:
        log.warning("logistic fit stopped at %d iterations, |grad| = %.2e", n_iter, np.linalg.norm(grad))
    return LogisticFit(
        weights=beta[:d], intercept=float(beta[d]),
        converged=converged, grad_norm=float(np.linalg.norm(grad)), n_iter=n_iter,
    )


# ---------------------------------------------------------------------------
# linear probing protocol
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    fractions: Sequence[float] = (1.0, 5.0, 10.0, 50.0, 100.0)  # percent
    seeds: Sequence[int] = (2020, 2021, 2022, 2023, 2024)
    c_reg: float = 1.0


@dataclass
class ProbeRow:
    fraction: float
    seed: int
    auroc: float
    auprc: float
    n_train: int
    converged: bool


def stratified_fraction(labels: np.ndarray, fraction_pct: float, rng) -> np.ndarray:
    """Pick `fraction_pct` percent of indices, stratified by label, >= 1 per class."""
    out = []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        take = max(1, int(round(members.size * fraction_pct / 100.0)))
        out.append(rng.permutation(members)[:take])
    return np.sort(np.concatenate(out))


def compute_embeddings(
    params: ModelParams, bundle: DatasetBundle, indices: np.ndarray, batch_size: int = 256
) -> np.ndarray:
    rows = np.empty((len(indices), params.config.d_embed))
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo : lo + batch_size]
        plans = [keep_all_plan(IntrinsicMask(bundle.m[int(i)])) for i in chunk]
        rows[lo : lo + len(chunk)] = cls_embeddings(
            params, bundle.x[chunk], bundle.t[chunk], plans
        )
    return rows


def linear_probe(
    params: ModelParams,
    bundle: DatasetBundle,
    task: str,
    config: ProbeConfig = ProbeConfig(),
    first_day_only: bool = True,
) -> list:
    """Frozen-encoder probe: one ProbeRow per (fraction, seed), fixed test set."""
    def labeled(split):
        idx = bundle.split_indices(split)
        if first_day_only:
            idx = idx[bundle.day_index[idx] == 0]
        labels = bundle.label_column(task)[idx]
        keep = np.isfinite(labels)
        return idx[keep], labels[keep]

    train_idx, y_train = labeled(TRAIN)
    test_idx, y_test = labeled(TEST)
    if train_idx.size == 0 or test_idx.size == 0:
        raise DataError("probe needs labeled train and test samples")
    emb_train = compute_embeddings(params, bundle, train_idx)
    emb_test = compute_embeddings(params, bundle, test_idx)

    rows = []
    for fraction in config.fractions:
        for seed in config.seeds:
            rng = RunRng(seed).stream(f"probe/{fraction}")
            pick = (
                np.arange(train_idx.size)
                if fraction >= 100.0
                else stratified_fraction(y_train, fraction, rng)
            )
            fit = fit_logistic(emb_train[pick], y_train[pick], c_reg=config.c_reg)
            scores = fit.decision(emb_test)
            rows.append(
                ProbeRow(
                    fraction=float(fraction), seed=int(seed),
                    auroc=auroc(scores, y_test), auprc=auprc(scores, y_test),
                    n_train=int(pick.size), converged=fit.converged,
                )
            )
    return rows


def summarize_probe(rows: list) -> dict:
    """fraction -> (mean, sd) AUROC over seeds."""
    out = {}
    for fraction in sorted({r.fraction for r in rows}):
        vals = np.array([r.auroc for r in rows if r.fraction == fraction])
        out[fraction] = (float(vals.mean()), float(vals.std()))
    return out


def median_imputed_baseline(
    bundle: DatasetBundle,
    task: str,
    config: ProbeConfig = ProbeConfig(),
    first_day_only: bool = True,
) -> list:
    """Logistic regression on raw grid features with train-median imputation.

    Reference point for the probe: same protocol, but the features are the
    normalized grid values with missing entries filled by the training
    split's per-column median of observed values.
    """
    def labeled(split):
        idx = bundle.split_indices(split)
        if first_day_only:
            idx = idx[bundle.day_index[idx] == 0]
        labels = bundle.label_column(task)[idx]
        keep = np.isfinite(labels)
        return idx[keep], labels[keep]

    train_idx, y_train = labeled(TRAIN)
    test_idx, y_test = labeled(TEST)
    observed = np.where(bundle.m[train_idx] == 1, bundle.x[train_idx], np.nan)
    counts = (bundle.m[train_idx] == 1).sum(axis=0)
    medians = np.zeros(bundle.grid_len)
    seen = counts > 0  # never-observed columns impute to 0.0
    medians[seen] = np.nanmedian(observed[:, seen], axis=0)

    def features(idx):
        x = bundle.x[idx].copy()
        miss = bundle.m[idx] == 0
        x[miss] = np.broadcast_to(medians, x.shape)[miss]
        return x

    f_train, f_test = features(train_idx), features(test_idx)
    rows = []
    for fraction in config.fractions:
        for seed in config.seeds:
            rng = RunRng(seed).stream(f"baseline/{fraction}")
            pick = (
                np.arange(train_idx.size)
                if fraction >= 100.0
                else stratified_fraction(y_train, fraction, rng)
            )
            fit = fit_logistic(f_train[pick], y_train[pick], c_reg=config.c_reg)
            scores = fit.decision(f_test)
            rows.append(
                ProbeRow(
                    fraction=float(fraction), seed=int(seed),
                    auroc=auroc(scores, y_test), auprc=auprc(scores, y_test),
                    n_train=int(pick.size), converged=fit.converged,
                )
            )
    return rows


# ---------------------------------------------------------------------------
# reconstruction evaluations
# ---------------------------------------------------------------------------

@dataclass
class ReconReport:
    name: str
    nrmse: float
    nmae: float
    r2: float
    n_eval: int
    n_skipped: int = 0
    extra: dict = field(default_factory=dict)


def _predict_hidden(
    params: ModelParams,
    bundle: DatasetBundle,
    indices: np.ndarray,
    plan_of: dict,
    batch_size: int = 256,
):
    """Run reconstruction and return (predictions, truths) at each sample's
    evaluation positions, as flat arrays."""
    preds, truths = [], []
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo : lo + batch_size]
        plans = [plan_of[int(i)][0] for i in chunk]
        eval_pos = [plan_of[int(i)][1] for i in chunk]
        x_hat, _ = reconstruct_batch(params, bundle.x[chunk], bundle.t[chunk], plans)
        for row, idx, pos in zip(x_hat.data, chunk, eval_pos):
            preds.append(row[pos])
            truths.append(bundle.x[int(idx), pos])
    if preds:
        return np.concatenate(preds), np.concatenate(truths)
    return np.array([]), np.array([])


def observed_value_range(values: np.ndarray) -> float:
    """Winsorized (p5-p95) spread of the observed values, floored for stability."""
    if values.size < 2:
        return 1.0
    lo, hi = np.quantile(values, [0.05, 0.95])
    return float(max(hi - lo, 1e-9))


def single_value_reconstruction(
    params: ModelParams,
    bundle: DatasetBundle,
    features: Optional[Sequence[str]] = None,
    split: int = TEST,
    max_samples_per_feature: int = 2000,
    seed: int = 0,
) -> list:
    """Hide one observed slot at a time and score the model's prediction.

    Evaluates the `day` slot of each lab feature (or every slot of the named
    features) over samples where it is observed; features never observed in
    the split are skipped with a note.
    """
    indices = bundle.split_indices(split)
    if features is None:
        features = [f.id for f in bundle.registry.labs] or sorted(set(bundle.slot_feature))
    reports = []
    rng = RunRng(seed).stream("svr")
    for feature in features:
        cols = bundle.feature_slots(feature)
        day_cols = [c for c in cols if bundle.slot_tag[c] == "day"] or list(cols)
        col = day_cols[0]
        observed = indices[bundle.m[indices, col] == 1]
        if observed.size == 0:
            log.info("feature %s never observed in split %d; skipped", feature, split)
            reports.append(ReconReport(feature, float("nan"), float("nan"), float("nan"), 0, n_skipped=1))
            continue
        if observed.size > max_samples_per_feature:
            observed = np.sort(rng.permutation(observed)[:max_samples_per_feature])
        plan_of = {}
        skipped = 0
        for i in observed:
            m_prime = np.ones(bundle.grid_len, dtype=np.uint8)
            m_prime[col] = 0
            plan = MaskPlan(bundle.m[int(i)], m_prime)
            if plan.kept.size == 0:
                skipped += 1
                continue
            plan_of[int(i)] = (plan, np.array([col]))
        usable = np.array([i for i in observed if int(i) in plan_of])
        pred, truth = _predict_hidden(params, bundle, usable, plan_of)
        if truth.size < 2 or np.unique(truth).size < 2:
            reports.append(ReconReport(feature, float("nan"), float("nan"), float("nan"), int(truth.size), skipped))
            continue
        nrmse, nmae, r2 = regression_metrics(pred, truth, observed_value_range(truth))
        reports.append(ReconReport(feature, nrmse, nmae, r2, int(truth.size), skipped))
    return reports


def imputation_sweep(
    params: ModelParams,
    bundle: DatasetBundle,
    mode: str,
    ratios: Sequence[float] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6),
    panel: Optional[str] = None,
    split: int = TEST,
    seed: int = 0,
    max_samples: int = 1000,
) -> list:
    """Reconstruction under injected missingness.

    mode "random": per ratio, hide that fraction of observed tokens on top of
    intrinsic missingness and score reconstruction of every intrinsically
    observed token (ratio 0.0 is the no-injection baseline). mode "panel":
    hide every slot of the named registry panel and score those tokens.
    """
    indices = bundle.split_indices(split)
    rng = RunRng(seed).stream(f"sweep/{mode}")
    if indices.size > max_samples:
        indices = np.sort(rng.permutation(indices)[:max_samples])

    reports = []
    if mode == "random":
        for ratio in ratios:
            if not (0.0 <= ratio < 1.0):
                raise DataError(f"injection ratio must lie in [0, 1), got {ratio}")
            plan_of = {}
            skipped = 0
            draw_rng = RunRng(seed).stream(f"sweep/random/{ratio}")
            for i in indices:
                m_row = bundle.m[int(i)]
                observed = np.flatnonzero(m_row == 1)
                hide = observed[draw_rng.random(observed.size) < ratio]
                m_prime = np.ones(bundle.grid_len, dtype=np.uint8)
                m_prime[hide] = 0
                plan = MaskPlan(m_row, m_prime)
                if plan.kept.size == 0:
                    skipped += 1
                    continue
                plan_of[int(i)] = (plan, observed)
            usable = np.array([i for i in indices if int(i) in plan_of])
            pred, truth = _predict_hidden(params, bundle, usable, plan_of)
            nrmse, nmae, r2 = regression_metrics(pred, truth, observed_value_range(truth))
            reports.append(
                ReconReport(f"random@{ratio}", nrmse, nmae, r2, int(truth.size),
                            skipped, extra={"ratio": float(ratio)})
            )
        return reports

    if mode == "panel":
        panels = bundle.registry.panels()
        if panel not in panels:
            raise DataError(f"unknown panel {panel!r}; registry defines {sorted(panels)}")
        cols = np.concatenate([bundle.feature_slots(f) for f in panels[panel]])
        plan_of = {}
        skipped = 0
        for i in indices:
            m_row = bundle.m[int(i)]
            target = cols[m_row[cols] == 1]
            if target.size == 0:
                skipped += 1
                continue
            m_prime = np.ones(bundle.grid_len, dtype=np.uint8)
            m_prime[cols] = 0
            plan = MaskPlan(m_row, m_prime)
            if plan.kept.size == 0:
                skipped += 1
                continue
            plan_of[int(i)] = (plan, target)
        usable = np.array([i for i in indices if int(i) in plan_of])
        pred, truth = _predict_hidden(params, bundle, usable, plan_of)
        nrmse, nmae, r2 = regression_metrics(pred, truth, observed_value_range(truth))
        return [ReconReport(f"panel@{panel}", nrmse, nmae, r2, int(truth.size), skipped,
                            extra={"panel": panel})]

    raise DataError(f"unknown sweep mode {mode!r}")
