"""Command-line behavior: exit codes, manifests, artifact verification."""

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from dualmae.cli import main

TINY_MODEL = [
    "--set", "model.d_embed=8", "--set", "model.enc_depth=1", "--set", "model.enc_heads=2",
    "--set", "model.dec_embed=8", "--set", "model.dec_depth=1", "--set", "model.dec_heads=2",
    "--set", "model.head_hidden=4", "--set", "model.mlp_ratio=2.0",
]
TINY_SCHED = [
    "--set", "schedule.max_epochs=2", "--set", "schedule.warmup_epochs=1",
    "--set", "schedule.batch_size=32",
]


def run(*argv):
    return main(list(argv))


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = {
        "synth": {
            "n_subjects": 30, "days_per_subject": 2, "n_labs": 4, "n_vitals": 1,
            "n_vasopressors": 1, "n_factors": 2, "missing_low": 0.1,
            "missing_high": 0.5, "seed": 3,
        }
    }
    cfg_path = root / "synth.json"
    cfg_path.write_text(json.dumps(synth_cfg))
    assert run("synth", "--config", str(cfg_path), "--out", str(root / "raw")) == 0
    assert run(
        "preprocess",
        "--events", str(root / "raw" / "events.csv"),
        "--labels", str(root / "raw" / "labels.csv"),
        "--registry", str(root / "raw" / "registry.json"),
        "--out", str(root / "data"),
    ) == 0
    assert run(
        "pretrain", "--data", str(root / "data"), "--out", str(root / "pre"),
        "--seed", "1", *TINY_MODEL, *TINY_SCHED,
    ) == 0
    return root


class TestSynthDeterminism:
    def test_same_seed_same_hashes(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synth": {"n_subjects": 12, "n_labs": 3}}))
        for d in ("a", "b"):
            assert run("synth", "--config", str(cfg), "--seed", "7",
                       "--out", str(tmp_path / d)) == 0
        manifests = [
            json.loads((tmp_path / d / "run_manifest.json").read_text()) for d in ("a", "b")
        ]
        assert manifests[0]["outputs"]["hashes"] == manifests[1]["outputs"]["hashes"]

    def test_different_seed_different_hashes(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synth": {"n_subjects": 12, "n_labs": 3}}))
        hashes = []
        for seed, d in ((7, "a"), (8, "b")):
            assert run("synth", "--config", str(cfg), "--seed", str(seed),
                       "--out", str(tmp_path / d)) == 0
            manifest = json.loads((tmp_path / d / "run_manifest.json").read_text())
            hashes.append(manifest["outputs"]["hashes"]["events"])
        assert hashes[0] != hashes[1]


class TestExitCodes:
    def test_pretrain_without_preprocess_is_data_error(self, tmp_path, capsys):
        code = run("pretrain", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "o"))
        assert code == 2
        err = capsys.readouterr().err
        assert "manifest" in err and "nowhere" in err

    def test_unknown_subcommand_is_usage_error(self, capsys):
        assert run("transmogrify") == 1

    def test_unknown_config_key_is_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synth": {"n_subjects": 5}, "modle": {}}))
        assert run("synth", "--config", str(cfg), "--out", str(tmp_path / "o")) == 1
        assert "unknown config key" in capsys.readouterr().err

    def test_unknown_flag_is_usage_error(self):
        assert run("synth", "--frobnicate") == 1

    def test_tampered_dataset_is_data_error(self, workspace, tmp_path, capsys):
        import shutil

        broken = tmp_path / "broken"
        shutil.copytree(workspace / "data", broken)
        payload = dict(np.load(broken / "dataset.npz", allow_pickle=False))
        payload["x"] = payload["x"] + 0.5
        np.savez(broken / "dataset.npz", **payload)
        code = run("pretrain", "--data", str(broken), "--out", str(tmp_path / "o"),
                   *TINY_MODEL, *TINY_SCHED)
        assert code == 2
        assert "hash mismatch" in capsys.readouterr().err

    def test_checkpoint_dataset_mismatch_refused(self, workspace, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synth": {"n_subjects": 30, "days_per_subject": 2,
                                             "n_labs": 4, "n_vitals": 1, "n_vasopressors": 1,
                                             "n_factors": 2, "missing_low": 0.1,
                                             "missing_high": 0.5, "seed": 99}}))
        assert run("synth", "--config", str(cfg), "--out", str(tmp_path / "raw")) == 0
        assert run("preprocess",
                   "--events", str(tmp_path / "raw" / "events.csv"),
                   "--labels", str(tmp_path / "raw" / "labels.csv"),
                   "--registry", str(tmp_path / "raw" / "registry.json"),
                   "--out", str(tmp_path / "data2")) == 0
        code = run("probe", "--data", str(tmp_path / "data2"),
                   "--checkpoint", str(workspace / "pre" / "checkpoint_best.npz"),
                   "--task", "outcome", "--out", str(tmp_path / "o"))
        assert code == 2
        assert "trained on dataset" in capsys.readouterr().err


class TestHelp:
    @pytest.mark.parametrize(
        "command",
        ["synth", "preprocess", "pretrain", "finetune", "probe", "reconstruct", "sweep", "embed"],
    )
    def test_every_subcommand_has_help(self, command, capsys):
        assert run(command, "--help") == 0
        out = capsys.readouterr().out
        assert "usage" in out and command in out


class TestPipelineCommands:
    def test_probe_emits_row_per_fraction_seed(self, workspace, tmp_path):
        out = tmp_path / "probe"
        code = run("probe", "--data", str(workspace / "data"),
                   "--checkpoint", str(workspace / "pre" / "checkpoint_best.npz"),
                   "--task", "outcome", "--fractions", "10,100",
                   "--set", "eval.seeds=[2020,2021,2022]",
                   "--out", str(out))
        assert code == 0
        with open(out / "probe.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 3
        assert {(r["fraction"], r["seed"]) for r in rows} == {
            (f, s) for f in ("10.0", "100.0") for s in ("2020", "2021", "2022")
        }

    def test_finetune_writes_metrics_and_checkpoint(self, workspace, tmp_path):
        out = tmp_path / "ft"
        code = run("finetune", "--data", str(workspace / "data"),
                   "--checkpoint", str(workspace / "pre" / "checkpoint_best.npz"),
                   "--task", "outcome", "--out", str(out),
                   "--set", "finetune.max_epochs=2", "--set", "finetune.batch_size=32")
        assert code == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert 0.0 <= metrics["test_auroc"] <= 1.0
        assert (out / "checkpoint_finetuned.npz").exists()

    def test_reconstruct_modes(self, workspace, tmp_path):
        for mode, extra in (("single", ["--features", "lab_00,lab_01"]),
                            ("random", ["--ratios", "0.0,0.3"]),
                            ("panel", ["--panel", "group0"])):
            out = tmp_path / f"rec_{mode}"
            code = run("reconstruct", "--data", str(workspace / "data"),
                       "--checkpoint", str(workspace / "pre" / "checkpoint_best.npz"),
                       "--mode", mode, *extra, "--out", str(out))
            assert code == 0, mode
            with open(out / "reconstruction.csv") as fh:
                rows = list(csv.DictReader(fh))
            assert rows

    def test_embed_dumps_all_samples(self, workspace, tmp_path):
        out = tmp_path / "emb"
        code = run("embed", "--data", str(workspace / "data"),
                   "--checkpoint", str(workspace / "pre" / "checkpoint_best.npz"),
                   "--out", str(out))
        assert code == 0
        with open(out / "embeddings.csv") as fh:
            rows = list(csv.DictReader(fh))
        manifest = json.loads((workspace / "data" / "manifest.json").read_text())
        assert len(rows) == manifest["n_samples"]
        assert "e7" in rows[0] and "e8" not in rows[0]

    def test_training_log_exists_with_expected_header(self, workspace):
        log = (workspace / "pre" / "training_log.csv").read_text().splitlines()
        assert log[0] == "epoch,split,lr,unmasked_term,masked_term,total"
        assert len(log) == 1 + 2 * 2  # two epochs, train+val rows

    def test_output_dir_env_var(self, workspace, tmp_path, monkeypatch):
        monkeypatch.setenv("DUALMAE_OUTPUT_DIR", str(tmp_path / "envout"))
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"synth": {"n_subjects": 5, "n_labs": 2}}))
        assert run("synth", "--config", str(cfg)) == 0
        assert (tmp_path / "envout" / "events.csv").exists()
