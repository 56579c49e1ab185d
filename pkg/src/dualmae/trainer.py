"""Optimization loops: masked pretraining, supervised fine-tuning.

Every stochastic choice (augmented masks, shuffles, dropout) is drawn from a
stream keyed by (run seed, purpose, epoch), so a run is reproducible bit for
bit and a checkpoint saved at an epoch boundary resumes into the identical
trajectory.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .autodiff import Tape, backward
from .errors import ConfigError, DataError, TrainingDiverged
from .masking import IntrinsicMask, MaskPolicy, keep_all_plan, sample_training_plan
from .model import ModelConfig, ModelParams, classify_logits, reconstruct_batch
from .objective import bce_value, bce_with_logits, dual_reconstruction_loss
from .pipeline.dataset import DatasetBundle
from .pipeline.splits import TEST, TRAIN, VAL
from .rng import RunRng

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class PretrainSchedule:
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_epochs: int = 20
    max_epochs: int = 400
    weight_decay: float = 0.05
    batch_size: int = 64
    grad_accum: int = 1
    nan_policy: str = "abort"  # "abort" | "halve_lr"

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class FinetuneSchedule:
    enc_lr: float = 1e-5
    head_lr: float = 1e-3
    weight_decay: float = 1e-5
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 10

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def cosine_lr(epoch: int, schedule: PretrainSchedule) -> float:
    """Linear warmup from 0 to base, then cosine decay from base to min."""
    if epoch < 0:
        raise ConfigError("epoch must be non-negative")
    warm = schedule.warmup_epochs
    if warm > 0 and epoch < warm:
        return schedule.base_lr * epoch / warm
    span = max(schedule.max_epochs - warm, 1)
    progress = min((epoch - warm) / span, 1.0)
    return schedule.min_lr + 0.5 * (schedule.base_lr - schedule.min_lr) * (1.0 + np.cos(np.pi * progress))


class AdamWState:
    """First/second moment slots per parameter plus the shared step counter."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict = {}
        self.v: dict = {}
        self.step = 0

    def slot(self, name: str, shape) -> tuple:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)
        return self.m[name], self.v[name]

    def state_arrays(self) -> dict:
        out = {}
        for name, arr in self.m.items():
            out[f"opt_m/{name}"] = arr
        for name, arr in self.v.items():
            out[f"opt_v/{name}"] = arr
        out["opt_step"] = np.array(self.step, dtype=np.int64)
        return out

    @classmethod
    def from_arrays(cls, arrays: dict, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamWState":
        state = cls(beta1, beta2, eps)
        for key, arr in arrays.items():
            if key.startswith("opt_m/"):
                state.m[key[6:]] = arr.copy()
            elif key.startswith("opt_v/"):
                state.v[key[6:]] = arr.copy()
        state.step = int(arrays["opt_step"])
        return state


def adamw_step(named_params, state: AdamWState, lr: float, weight_decay: float):
    """One decoupled-weight-decay Adam update over the given parameters.

    Parameters without a gradient are treated as zero-gradient (their moments
    decay and weight decay still applies). Non-finite gradients abort the
    step before any parameter is touched.
    """
    named_params = list(named_params)
    for name, tensor in named_params:
        if tensor.grad is not None and not np.isfinite(tensor.grad).all():
            raise TrainingDiverged(f"non-finite gradient in {name}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t
    for name, tensor in named_params:
        g = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        m, v = state.slot(name, tensor.data.shape)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / bias1
        v_hat = v / bias2
        tensor.data = tensor.data - lr * (m_hat / (np.sqrt(v_hat) + state.eps)) - lr * weight_decay * tensor.data


class EarlyStopper:
    """Halt when a higher-is-better metric stops improving for `patience` epochs."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1

    def update(self, metric: float, epoch: int) -> bool:
        if metric > self.best:
            self.best = metric
            self.best_epoch = epoch
        return epoch - self.best_epoch >= self.patience


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, opt_state: Optional[AdamWState], meta: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": v for k, v in params.state_arrays().items()}
    if opt_state is not None:
        arrays.update(opt_state.state_arrays())
    meta = {"checkpoint_version": CHECKPOINT_VERSION, "model_config": params.config.to_dict(), **meta}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)
    return path


def load_checkpoint(path):
    """Returns (params, opt_state or None, meta)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing checkpoint: {path}")
    with np.load(path, allow_pickle=False) as payload:
        arrays = {k: payload[k] for k in payload.files}
    meta = json.loads(bytes(arrays.pop("__meta__")).decode())
    config = ModelConfig.from_dict(meta["model_config"])
    params = ModelParams.initialize(config, RunRng(0).stream("checkpoint-shape"))
    params.load_state({k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    opt_state = AdamWState.from_arrays(arrays) if "opt_step" in arrays else None
    return params, opt_state, meta


def checkpoint_hash(path) -> str:
    from .pipeline.dataset import hash_arrays

    with np.load(path, allow_pickle=False) as payload:
        return hash_arrays({k: payload[k] for k in payload.files})


# ---------------------------------------------------------------------------
# pretraining
# ---------------------------------------------------------------------------

@dataclass
class PretrainResult:
    params: ModelParams
    opt_state: AdamWState
    history: list
    best_epoch: int
    best_val_total: float
    best_state: dict = field(repr=False, default_factory=dict)


def _intrinsic_masks(bundle: DatasetBundle) -> list:
    return [IntrinsicMask(bundle.m[i]) for i in range(bundle.n_samples)]


def _epoch_mean(reports) -> tuple:
    unmasked = float(np.mean([r.unmasked_term for r in reports]))
    masked = float(np.mean([r.masked_term for r in reports]))
    total = float(np.mean([r.total for r in reports]))
    return unmasked, masked, total


def _eval_reconstruction(params, bundle, indices, plans, batch_size):
    reports = []
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo : lo + batch_size]
        chunk_plans = [plans[i] for i in chunk]
        x_hat, _ = reconstruct_batch(params, bundle.x[chunk], bundle.t[chunk], chunk_plans)
        _, rep = dual_reconstruction_loss(x_hat, bundle.x[chunk], chunk_plans)
        reports.extend(rep)
    return reports


def pretrain(
    bundle: DatasetBundle,
    model_config: ModelConfig,
    policy: MaskPolicy,
    schedule: PretrainSchedule,
    seed: int,
    out_dir=None,
    resume: Optional[tuple] = None,
    stop_epoch: Optional[int] = None,
) -> PretrainResult:
    """Masked pretraining on the bundle's training split.

    `resume` is (params, opt_state, start_epoch) as produced by
    load_checkpoint; epochs in [start_epoch, max_epochs) then run with
    exactly the masks and shuffles the uninterrupted run would have drawn.
    `stop_epoch` interrupts the run early without altering the schedule, so
    a checkpoint saved there resumes into the identical trajectory.
    """
    if model_config.grid_len != bundle.grid_len:
        raise ConfigError(
            f"model grid_len {model_config.grid_len} != dataset grid {bundle.grid_len}"
        )
    run = RunRng(seed)
    train_idx = bundle.split_indices(TRAIN)
    val_idx = bundle.split_indices(VAL)
    if train_idx.size == 0:
        raise DataError("training split is empty")

    if resume is not None:
        params, opt_state, start_epoch = resume
    else:
        params = ModelParams.initialize(model_config, run.stream("init"))
        opt_state = AdamWState()
        start_epoch = 0

    masks = _intrinsic_masks(bundle)
    p_miss = bundle.slot_missing_rates(train_idx)  # training split, stable per epoch
    weights = policy.weights(p_miss)
    val_plan_rng = run.stream("val-plan")
    val_plans = {int(i): sample_training_plan(masks[i], weights, val_plan_rng) for i in val_idx}

    pretrain_names = [
        (n, t) for n, t in params.named_parameters() if not n.startswith("head.")
    ]

    history = []
    best_val = np.inf
    best_epoch = -1
    best_state: dict = {}
    lr_scale = 1.0
    log_path = Path(out_dir) / "training_log.csv" if out_dir else None
    if log_path and start_epoch == 0:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("epoch,split,lr,unmasked_term,masked_term,total\n")

    last_epoch = schedule.max_epochs if stop_epoch is None else min(stop_epoch, schedule.max_epochs)
    for epoch in range(start_epoch, last_epoch):
        lr = cosine_lr(epoch, schedule) * lr_scale
        plan_rng = run.stream(f"plan/{epoch}")
        plans = {int(i): sample_training_plan(masks[i], weights, plan_rng) for i in train_idx}
        order = train_idx[run.stream(f"shuffle/{epoch}").permutation(train_idx.size)]

        train_reports = []
        pending = 0
        for lo in range(0, order.size, schedule.batch_size):
            chunk = order[lo : lo + schedule.batch_size]
            chunk_plans = [plans[int(i)] for i in chunk]
            with Tape():
                x_hat, _ = reconstruct_batch(params, bundle.x[chunk], bundle.t[chunk], chunk_plans)
                loss, reports = dual_reconstruction_loss(x_hat, bundle.x[chunk], chunk_plans)
                if not np.isfinite(loss.data):
                    _dump_divergence(out_dir, epoch, lo, reports)
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
                backward(loss)
            train_reports.extend(reports)
            pending += 1
            if pending == schedule.grad_accum:
                try:
                    adamw_step(pretrain_names, opt_state, lr, schedule.weight_decay)
                except TrainingDiverged:
                    if schedule.nan_policy == "halve_lr":
                        lr_scale *= 0.5
                        log.warning("non-finite gradients; halving lr scale to %g", lr_scale)
                    else:
                        _dump_divergence(out_dir, epoch, lo, reports)
                        raise
                params.zero_grads()
                pending = 0
        if pending:
            adamw_step(pretrain_names, opt_state, lr, schedule.weight_decay)
            params.zero_grads()

        row = {"epoch": epoch, "lr": lr}
        row["train_unmasked"], row["train_masked"], row["train_total"] = _epoch_mean(train_reports)
        if val_idx.size:
            val_reports = _eval_reconstruction(
                params, bundle, val_idx, val_plans, schedule.batch_size
            )
            row["val_unmasked"], row["val_masked"], row["val_total"] = _epoch_mean(val_reports)
        else:
            row["val_unmasked"] = row["val_masked"] = row["val_total"] = float("nan")
        history.append(row)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(f"{epoch},train,{lr},{row['train_unmasked']},{row['train_masked']},{row['train_total']}\n")
                fh.write(f"{epoch},val,{lr},{row['val_unmasked']},{row['val_masked']},{row['val_total']}\n")

        monitor = row["val_total"] if val_idx.size else row["train_total"]
        if monitor < best_val:
            best_val = monitor
            best_epoch = epoch
            best_state = params.state_arrays()

    if best_epoch < 0:  # zero-epoch run
        best_state = params.state_arrays()
        best_epoch = start_epoch
        best_val = float("nan")
    return PretrainResult(
        params=params, opt_state=opt_state, history=history,
        best_epoch=best_epoch, best_val_total=float(best_val), best_state=best_state,
    )


def _dump_divergence(out_dir, epoch, batch_offset, reports):
    if not out_dir:
        return
    payload = {
        "epoch": epoch,
        "batch_offset": batch_offset,
        "reports": [r.__dict__ for r in reports[-4:]],
    }
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    (Path(out_dir) / "divergence.json").write_text(json.dumps(payload, indent=2) + "\n")


# ---------------------------------------------------------------------------
# fine-tuning
# ---------------------------------------------------------------------------

@dataclass
class FinetuneResult:
    params: ModelParams
    history: list
    best_epoch: int
    best_val_auroc: float
    test_auroc: float
    test_auprc: float
    best_state: dict = field(repr=False, default_factory=dict)


def _labeled_subset(bundle: DatasetBundle, task: str, split: int, first_day_only: bool):
    idx = bundle.split_indices(split)
    if first_day_only:
        idx = idx[bundle.day_index[idx] == 0]
    labels = bundle.label_column(task)[idx]
    keep = np.isfinite(labels)
    return idx[keep], labels[keep]


def _batched_logits(params, bundle, indices, plans, batch_size=256, train=False, rng=None):
    out = np.empty(len(indices))
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo : lo + batch_size]
        chunk_plans = [plans[int(i)] for i in chunk]
        logits = classify_logits(
            params, bundle.x[chunk], bundle.t[chunk], chunk_plans, train=train, rng=rng
        )
        out[lo : lo + len(chunk)] = logits.data
    return out


def finetune(
    params: ModelParams,
    bundle: DatasetBundle,
    task: str,
    schedule: FinetuneSchedule,
    seed: int,
    first_day_only: bool = True,
    reinit_head: bool = True,
    restore_best: bool = True,
) -> FinetuneResult:
    """Supervised fine-tuning with differential learning rates.

    The encoder-side group (embeddings, encoder blocks, special tokens) moves
    at enc_lr, the classification head at head_lr; the decoder and its
    reconstruction head stay frozen. Early stopping watches validation AUROC.
    """
    from .evaluate import auprc, auroc

    run = RunRng(seed)
    if reinit_head:
        head_rng = run.stream("head-init")
        from .rng import truncated_normal

        params.head_w1.data = truncated_normal(head_rng, params.head_w1.data.shape)
        params.head_b1.data = np.zeros_like(params.head_b1.data)
        params.head_w2.data = truncated_normal(head_rng, params.head_w2.data.shape)
        params.head_b2.data = np.zeros_like(params.head_b2.data)

    train_idx, y_train = _labeled_subset(bundle, task, TRAIN, first_day_only)
    val_idx, y_val = _labeled_subset(bundle, task, VAL, first_day_only)
    test_idx, y_test = _labeled_subset(bundle, task, TEST, first_day_only)
    for name, labels in (("train", y_train), ("val", y_val)):
        if labels.size == 0 or len(np.unique(labels)) < 2:
            raise DataError(f"{name} split has a single class for task {task!r}; cannot fine-tune")

    masks = _intrinsic_masks(bundle)
    plans = {int(i): keep_all_plan(masks[int(i)]) for i in np.concatenate([train_idx, val_idx, test_idx])}

    by_name = dict(params.named_parameters())
    enc_group = [(n, by_name[n]) for n in params.encoder_parameter_names()]
    head_group = [(n, by_name[n]) for n in params.head_parameter_names()]
    # one optimizer per learning-rate group, equivalent to two independent AdamWs
    enc_state = AdamWState()
    head_state = AdamWState()

    stopper = EarlyStopper(schedule.patience)
    history = []
    best_state: dict = {}
    for epoch in range(schedule.max_epochs):
        order = train_idx[run.stream(f"ft-shuffle/{epoch}").permutation(train_idx.size)]
        y_by_idx = dict(zip(train_idx.tolist(), y_train.tolist()))
        drop_rng = run.stream(f"ft-dropout/{epoch}")
        losses = []
        for lo in range(0, order.size, schedule.batch_size):
            chunk = order[lo : lo + schedule.batch_size]
            chunk_plans = [plans[int(i)] for i in chunk]
            y_chunk = np.array([y_by_idx[int(i)] for i in chunk])
            with Tape():
                logits = classify_logits(
                    params, bundle.x[chunk], bundle.t[chunk], chunk_plans,
                    train=True, rng=drop_rng,
                )
                loss = bce_with_logits(logits, y_chunk)
                backward(loss)
            losses.append(float(loss.data))
            adamw_step(enc_group, enc_state, schedule.enc_lr, schedule.weight_decay)
            adamw_step(head_group, head_state, schedule.head_lr, schedule.weight_decay)
            params.zero_grads()

        val_logits = _batched_logits(params, bundle, val_idx, plans)
        val_auroc = auroc(val_logits, y_val)
        history.append(
            {"epoch": epoch, "train_bce": float(np.mean(losses)),
             "val_bce": bce_value(val_logits, y_val), "val_auroc": val_auroc}
        )
        improved = val_auroc > stopper.best
        should_stop = stopper.update(val_auroc, epoch)
        if improved:
            best_state = params.state_arrays()
        if should_stop:
            break

    if restore_best and best_state:
        params.load_state(best_state)
    test_logits = _batched_logits(params, bundle, test_idx, plans)
    uniq = np.unique(y_test)
    test_roc = auroc(test_logits, y_test) if uniq.size == 2 else float("nan")
    test_prc = auprc(test_logits, y_test) if (y_test == 1).any() else float("nan")
    return FinetuneResult(
        params=params, history=history,
        best_epoch=stopper.best_epoch, best_val_auroc=float(stopper.best),
        test_auroc=float(test_roc), test_auprc=float(test_prc),
        best_state=best_state,
    )
