"""Command-line entry point.

Subcommands: synth, preprocess, pretrain, finetune, probe, reconstruct,
sweep, embed. Each artifact-producing command writes a manifest echoing the
resolved configuration and content hashes; downstream commands verify
upstream hashes and refuse silently modified inputs.

Exit codes: 0 success, 1 configuration/usage error, 2 data/artifact error,
3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_config
from .errors import ConfigError, DataError
from .masking import MaskPolicy
from .model import ModelConfig, ModelParams
from .pipeline import (
    DatasetBundle,
    FeatureRegistry,
    SynthConfig,
    assemble_dataset,
    hash_file,
    input_variant,
    read_events,
    read_labels,
    write_synth_outputs,
)
from .rng import RunRng
from .trainer import (
    FinetuneSchedule,
    PretrainSchedule,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

log = logging.getLogger("dualmae")

OUTPUT_DIR_ENV = "DUALMAE_OUTPUT_DIR"


def _out_dir(args, config) -> Path:
    out = args.out or config.get("output_dir") or os.environ.get(OUTPUT_DIR_ENV)
    if not out:
        raise ConfigError("no output directory: pass --out, set output_dir, or export DUALMAE_OUTPUT_DIR")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: dict):
    doc = {
        "kind": f"dualmae/{command}",
        "version": __version__,
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=2, default=str) + "\n")
    return doc


def _load_bundle(path_str: str, variant: str = "full") -> DatasetBundle:
    data_dir = Path(path_str)
    manifest = data_dir / "manifest.json"
    if not manifest.exists():
        raise DataError(
            f"no processed dataset at {data_dir}: missing manifest {manifest} (run `dualmae preprocess` first)"
        )
    bundle = DatasetBundle.load(data_dir)
    return input_variant(bundle, variant)


def _load_checkpoint_for(bundle: DatasetBundle, path: str, allow_mismatch: bool):
    params, opt_state, meta = load_checkpoint(path)
    recorded = meta.get("dataset_hash")
    if recorded and recorded != bundle.content_hash():
        message = (
            f"checkpoint {path} was trained on dataset {recorded[:12]}, "
            f"but the provided dataset hashes to {bundle.content_hash()[:12]}"
        )
        if not allow_mismatch:
            raise DataError(message + " (pass --allow-data-mismatch to evaluate anyway)")
        log.warning("%s (continuing under --allow-data-mismatch)", message)
    return params, opt_state, meta


def _model_config(config: dict, grid_len: int) -> ModelConfig:
    return ModelConfig(grid_len=grid_len, **config["model"])


def _write_csv(path: Path, rows: list, fieldnames: list):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, config) -> int:
    out_dir = _out_dir(args, config)
    synth_cfg = dict(config.get("synth") or {})
    if args.seed is not None:
        synth_cfg["seed"] = args.seed
    synth = SynthConfig.from_dict(synth_cfg)
    info = write_synth_outputs(synth, out_dir)
    hashes = {name: hash_file(info[name]) for name in ("events", "labels", "registry")}
    write_manifest(out_dir, "synth", {"synth": synth.to_dict()}, {}, {
        "events": str(info["events"]), "labels": str(info["labels"]),
        "registry": str(info["registry"]), "n_events": info["n_events"],
        "n_stays": info["n_stays"], "hashes": hashes,
    })
    print(f"synth: wrote {info['n_events']} events for {info['n_stays']} stays to {out_dir}")
    for name, digest in hashes.items():
        print(f"  {name} sha256 {digest[:16]}")
    return 0


def cmd_preprocess(args, config) -> int:
    out_dir = _out_dir(args, config)
    data_cfg = config["data"]
    events_path = args.events or data_cfg["events"]
    registry_path = args.registry or data_cfg["registry"]
    labels_path = args.labels or data_cfg["labels"]
    if not events_path or not registry_path:
        raise ConfigError("preprocess needs --events and --registry (or data.events / data.registry)")
    for path in filter(None, (events_path, registry_path, labels_path)):
        if not Path(path).exists():
            raise DataError(f"missing input file: {path}")

    registry = FeatureRegistry.load(registry_path)
    events, report = read_events(events_path, registry, data_cfg["time_format"])
    labels = read_labels(labels_path) if labels_path else None
    upstream = {"events": hash_file(events_path), "registry": hash_file(registry_path)}
    if labels_path:
        upstream["labels"] = hash_file(labels_path)
    bundle = assemble_dataset(
        events, registry, labels=labels,
        cut_time=data_cfg["cut_time"], cut_quantile=data_cfg["cut_quantile"],
        val_fraction=data_cfg["val_fraction"], seed=config["seed"],
        meta={"upstream": upstream, "ingest": asdict(report)},
    )
    variant = args.variant or data_cfg["variant"]
    bundle = input_variant(bundle, variant)
    bundle.save(out_dir)
    write_manifest(out_dir, "preprocess", {"data": data_cfg, "seed": config["seed"], "variant": variant},
                   upstream, {"dataset_hash": bundle.content_hash(),
                              "n_samples": bundle.n_samples, "grid_len": bundle.grid_len})
    print(f"preprocess: {bundle.n_samples} samples, grid length {bundle.grid_len} -> {out_dir}")
    print(f"  dataset sha256 {bundle.content_hash()[:16]}")
    return 0


def cmd_pretrain(args, config) -> int:
    out_dir = _out_dir(args, config)
    bundle = _load_bundle(args.data)
    model_config = _model_config(config, bundle.grid_len)
    policy = MaskPolicy(**config["masking"])
    schedule = PretrainSchedule(**config["schedule"])
    seed = config["seed"] if args.seed is None else args.seed
    result = pretrain(bundle, model_config, policy, schedule, seed, out_dir=out_dir)

    meta = {
        "kind": "pretrain", "seed": seed, "next_epoch": schedule.max_epochs,
        "dataset_hash": bundle.content_hash(), "masking": config["masking"],
        "schedule": schedule.to_dict(), "best_epoch": result.best_epoch,
        "best_val_total": result.best_val_total,
    }
    last_path = save_checkpoint(out_dir / "checkpoint_last.npz", result.params, result.opt_state, meta)
    best_params = ModelParams.initialize(model_config, RunRng(0).stream("best-shape"))
    best_params.load_state(result.best_state)
    best_path = save_checkpoint(out_dir / "checkpoint_best.npz", best_params, None,
                                {**meta, "selected": "best_val_total"})
    write_manifest(out_dir, "pretrain",
                   {"model": config["model"], "masking": config["masking"],
                    "schedule": config["schedule"], "seed": seed},
                   {"dataset_hash": bundle.content_hash()},
                   {"checkpoint_last": str(last_path), "checkpoint_best": str(best_path),
                    "best_epoch": result.best_epoch, "best_val_total": result.best_val_total})
    print(f"pretrain: {len(result.history)} epochs, best val total "
          f"{result.best_val_total:.6f} at epoch {result.best_epoch} -> {out_dir}")
    return 0


def cmd_finetune(args, config) -> int:
    out_dir = _out_dir(args, config)
    bundle = _load_bundle(args.data)
    task = args.task or config["eval"]["task"]
    if not task:
        raise ConfigError("finetune needs --task (or eval.task)")
    params, _, meta = _load_checkpoint_for(bundle, args.checkpoint, args.allow_data_mismatch)
    schedule = FinetuneSchedule(**config["finetune"])
    seed = config["seed"] if args.seed is None else args.seed
    result = finetune(params, bundle, task, schedule, seed)
    metrics = {
        "task": task, "best_epoch": result.best_epoch,
        "best_val_auroc": result.best_val_auroc,
        "test_auroc": result.test_auroc, "test_auprc": result.test_auprc,
    }
    ck = save_checkpoint(out_dir / "checkpoint_finetuned.npz", result.params, None,
                         {"kind": "finetune", "seed": seed, "task": task,
                          "dataset_hash": bundle.content_hash(),
                          "pretrain_meta": {k: meta.get(k) for k in ("seed", "best_epoch")}})
    (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    _write_csv(out_dir / "finetune_log.csv", result.history,
               ["epoch", "train_bce", "val_bce", "val_auroc"])
    write_manifest(out_dir, "finetune",
                   {"finetune": config["finetune"], "seed": seed, "task": task},
                   {"dataset_hash": bundle.content_hash(), "checkpoint": hash_file(args.checkpoint)},
                   {"checkpoint": str(ck), **metrics})
    print(f"finetune[{task}]: test AUROC {result.test_auroc:.4f}, AUPRC {result.test_auprc:.4f} -> {out_dir}")
    return 0


def cmd_probe(args, config) -> int:
    from .evaluate import ProbeConfig, linear_probe, median_imputed_baseline, summarize_probe

    out_dir = _out_dir(args, config)
    bundle = _load_bundle(args.data)
    task = args.task or config["eval"]["task"]
    if not task:
        raise ConfigError("probe needs --task (or eval.task)")
    params, _, _ = _load_checkpoint_for(bundle, args.checkpoint, args.allow_data_mismatch)
    fractions = (
        [float(f) for f in args.fractions.split(",")] if args.fractions
        else [float(f) for f in config["eval"]["fractions"]]
    )
    probe_cfg = ProbeConfig(fractions=fractions,
                            seeds=[int(s) for s in config["eval"]["seeds"]],
                            c_reg=float(config["eval"]["c_reg"]))
    rows = linear_probe(params, bundle, task, probe_cfg)
    records = [{"model": "pretrained", **asdict(r)} for r in rows]
    if args.baseline or config["eval"]["baseline"]:
        base = median_imputed_baseline(bundle, task, probe_cfg)
        records += [{"model": "median_imputed_lr", **asdict(r)} for r in base]
    _write_csv(out_dir / "probe.csv", records,
               ["model", "fraction", "seed", "auroc", "auprc", "n_train", "converged"])
    summary = {str(k): v for k, v in summarize_probe(rows).items()}
    (out_dir / "probe_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    write_manifest(out_dir, "probe",
                   {"eval": {**config["eval"], "task": task, "fractions": fractions}},
                   {"dataset_hash": bundle.content_hash(), "checkpoint": hash_file(args.checkpoint)},
                   {"rows": len(records), "summary": summary})
    print(f"probe[{task}]: {len(records)} rows -> {out_dir / 'probe.csv'}")
    for fraction, (mean, sd) in summarize_probe(rows).items():
        print(f"  fraction {fraction:g}%: AUROC {mean:.4f} +/- {sd:.4f}")
    return 0


def cmd_reconstruct(args, config) -> int:
    from .evaluate import imputation_sweep, single_value_reconstruction

    out_dir = _out_dir(args, config)
    bundle = _load_bundle(args.data)
    params, _, _ = _load_checkpoint_for(bundle, args.checkpoint, args.allow_data_mismatch)
    mode = args.mode
    if mode == "single":
        features = (
            args.features.split(",") if args.features else config["eval"]["features"]
        )
        reports = single_value_reconstruction(params, bundle, features=features, seed=config["seed"])
    elif mode == "panel":
        panel = args.panel or config["eval"]["panel"]
        if not panel:
            raise ConfigError("reconstruct --mode panel needs --panel")
        reports = imputation_sweep(params, bundle, "panel", panel=panel, seed=config["seed"])
    elif mode == "random":
        ratios = (
            [float(r) for r in args.ratios.split(",")] if args.ratios
            else [float(r) for r in config["eval"]["ratios"]]
        )
        reports = imputation_sweep(params, bundle, "random", ratios=ratios, seed=config["seed"])
    else:
        raise ConfigError(f"unknown reconstruction mode {mode!r}")
    rows = [
        {"name": r.name, "nrmse": r.nrmse, "nmae": r.nmae, "r2": r.r2,
         "n_eval": r.n_eval, "n_skipped": r.n_skipped}
        for r in reports
    ]
    _write_csv(out_dir / "reconstruction.csv", rows,
               ["name", "nrmse", "nmae", "r2", "n_eval", "n_skipped"])
    write_manifest(out_dir, "reconstruct", {"mode": mode, "eval": config["eval"]},
                   {"dataset_hash": bundle.content_hash(), "checkpoint": hash_file(args.checkpoint)},
                   {"rows": len(rows)})
    print(f"reconstruct[{mode}]: {len(rows)} rows -> {out_dir / 'reconstruction.csv'}")
    return 0


def cmd_embed(args, config) -> int:
    from .evaluate import compute_embeddings

    out_dir = _out_dir(args, config)
    bundle = _load_bundle(args.data)
    params, _, _ = _load_checkpoint_for(bundle, args.checkpoint, args.allow_data_mismatch)
    indices = np.arange(bundle.n_samples)
    emb = compute_embeddings(params, bundle, indices)
    path = out_dir / "embeddings.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "stay_id", "day_index", "split"]
                        + [f"e{i}" for i in range(emb.shape[1])])
        for i in indices:
            writer.writerow(
                [bundle.subject_id[i], bundle.stay_id[i], int(bundle.day_index[i]),
                 int(bundle.split[i])] + [repr(v) for v in emb[i]]
            )
    write_manifest(out_dir, "embed", {},
                   {"dataset_hash": bundle.content_hash(), "checkpoint": hash_file(args.checkpoint)},
                   {"embeddings": str(path), "rows": int(emb.shape[0])})
    print(f"embed: {emb.shape[0]} rows x {emb.shape[1]} dims -> {path}")
    return 0


def cmd_sweep(args, config) -> int:
    from .evaluate import ProbeConfig, linear_probe, summarize_probe

    out_dir = _out_dir(args, config)
    base_bundle = _load_bundle(args.data)
    sweep_cfg = config["sweep"]
    task = args.task or sweep_cfg["task"] or config["eval"]["task"]
    if not task:
        raise ConfigError("sweep needs a task (sweep.task or --task)")
    schedule = PretrainSchedule(**config["schedule"])
    probe_cfg = ProbeConfig(fractions=[float(f) for f in sweep_cfg["probe_fractions"]],
                            seeds=[int(s) for s in sweep_cfg["probe_seeds"]])
    seed = config["seed"] if args.seed is None else args.seed

    cells = []
    for a in sweep_cfg["grid_a"]:
        for b in sweep_cfg["grid_b"]:
            cells.append(("full", float(a), float(b)))
    default_a, default_b = config["masking"]["a"], config["masking"]["b"]
    for variant in sweep_cfg["variants"]:
        if variant == "full":
            continue
        cells.append((variant, float(default_a), float(default_b)))

    rows = []
    for variant, a, b in cells:
        bundle = input_variant(base_bundle, variant)
        model_config = _model_config(config, bundle.grid_len)
        result = pretrain(bundle, model_config, MaskPolicy(a=a, b=b), schedule, seed)
        probe_rows = linear_probe(result.params, bundle, task, probe_cfg)
        summary = summarize_probe(probe_rows)
        fraction = probe_cfg.fractions[0]
        rows.append({
            "variant": variant, "a": a, "b": b,
            "epochs": len(result.history),
            "best_val_total": result.best_val_total,
            "probe_auroc_mean": summary[fraction][0],
            "probe_auroc_sd": summary[fraction][1],
        })
        print(f"sweep cell variant={variant} a={a} b={b}: "
              f"val {result.best_val_total:.5f} probe {summary[fraction][0]:.4f}")
    _write_csv(out_dir / "sweep.csv", rows,
               ["variant", "a", "b", "epochs", "best_val_total",
                "probe_auroc_mean", "probe_auroc_sd"])
    write_manifest(out_dir, "sweep",
                   {"sweep": sweep_cfg, "schedule": config["schedule"],
                    "model": config["model"], "seed": seed, "task": task},
                   {"dataset_hash": base_bundle.content_hash()},
                   {"rows": len(rows), "sweep_csv": str(out_dir / "sweep.csv")})
    print(f"sweep: {len(rows)} cells -> {out_dir / 'sweep.csv'}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dualmae",
        description="Dual-masked autoencoder for incomplete clinical time-series tables",
    )
    parser.add_argument("--version", action="version", version=f"dualmae {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override a config key (dotted path)")
        p.add_argument("--out", help=f"output directory (or ${OUTPUT_DIR_ENV})")
        p.add_argument("--seed", type=int, help="override the run seed")
        if data:
            p.add_argument("--data", required=True, help="processed dataset directory")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint .npz file")
            p.add_argument("--allow-data-mismatch", action="store_true",
                           help="evaluate on a dataset other than the training one")

    p = sub.add_parser("synth", help="generate a synthetic event corpus")
    common(p)

    p = sub.add_parser("preprocess", help="events CSV -> tokenized dataset")
    common(p)
    p.add_argument("--events", help="event CSV (subject_id,stay_id,feature_id,time,value)")
    p.add_argument("--labels", help="label CSV (subject_id,stay_id,<tasks...>)")
    p.add_argument("--registry", help="feature registry JSON")
    p.add_argument("--variant", choices=["full", "zero_fill_vasopressor", "no_24h"],
                   help="input-design variant")

    p = sub.add_parser("pretrain", help="masked pretraining")
    common(p, data=True)

    p = sub.add_parser("finetune", help="supervised fine-tuning from a checkpoint")
    common(p, data=True, checkpoint=True)
    p.add_argument("--task", help="label column to fit")

    p = sub.add_parser("probe", help="linear probing on frozen embeddings")
    common(p, data=True, checkpoint=True)
    p.add_argument("--task", help="label column to fit")
    p.add_argument("--fractions", help="comma-separated training fractions in percent")
    p.add_argument("--baseline", action="store_true",
                   help="also run the median-imputed logistic baseline")

    p = sub.add_parser("reconstruct", help="reconstruction / imputation evaluations")
    common(p, data=True, checkpoint=True)
    p.add_argument("--mode", choices=["single", "panel", "random"], default="single")
    p.add_argument("--features", help="comma-separated feature ids (single mode)")
    p.add_argument("--panel", help="registry panel name (panel mode)")
    p.add_argument("--ratios", help="comma-separated injection ratios (random mode)")

    p = sub.add_parser("sweep", help="masking-grid and input-variant ablation sweep")
    common(p, data=True)
    p.add_argument("--task", help="label column for the probe metric")

    p = sub.add_parser("embed", help="dump CLS embeddings per sample to CSV")
    common(p, data=True, checkpoint=True)

    return parser


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "probe": cmd_probe,
    "reconstruct": cmd_reconstruct,
    "sweep": cmd_sweep,
    "embed": cmd_embed,
}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors; this tool reserves 2 for data errors
        return 1 if exc.code else 0
    try:
        config = load_config(args.config, args.overrides)
        if args.seed is not None:
            config["seed"] = args.seed
        return COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - boundary of the process
        print(f"runtime failure: {exc}", file=sys.stderr)
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
