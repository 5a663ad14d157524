"""CLI surface: subcommands, run-dir immutability, error-code contract."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from spoofprompt.checkpoint import checkpoint_keys, load_checkpoint
from spoofprompt.cli import main


TINY_CONFIG = {
    "seed": 3,
    "synth": {"live": 16, "physical": 8, "digital": 8, "image_size": 16, "alpha": 0.8},
    "data": {"train_fraction": 0.75},
    "encoder": {"image_size": 16, "patch_size": 8, "embed_dim": 16, "depth": 2, "heads": 2,
                "text_width": 16, "image_width": 16, "max_text_len": 12},
    "train": {"steps": 4, "batch_size": 8, "eval_every": 2, "context_clusters": 2,
              "text_prompt_len": 2, "visual_prompt_len": 2},
}


@pytest.fixture()
def workdir(tmp_path):
    cfg = tmp_path / "config.yaml"
    cfg.write_text(yaml.safe_dump(TINY_CONFIG))
    return tmp_path, cfg


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture()
def corpus_dir(workdir):
    tmp_path, cfg = workdir
    out = tmp_path / "corpus"
    assert run_cli("synth", "--config", cfg, "--out", out) == 0
    return tmp_path, cfg, out


class TestSynth:
    def test_writes_corpus_and_manifest(self, corpus_dir, capsys):
        tmp_path, cfg, out = corpus_dir
        assert (out / "manifest.csv").exists()
        rows = (out / "manifest.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 32
        assert (out / "run_manifest.json").exists()

    def test_refuses_overwrite_without_force(self, corpus_dir, capsys):
        tmp_path, cfg, out = corpus_dir
        assert run_cli("synth", "--config", cfg, "--out", out) == 2
        err = capsys.readouterr().err
        assert err.startswith("error: OVERWRITE:")
        assert run_cli("synth", "--config", cfg, "--out", out, "--force") == 0

    def test_seed_changes_corpus(self, workdir):
        tmp_path, cfg = workdir
        assert run_cli("synth", "--config", cfg, "--out", tmp_path / "a", "--seed", 1) == 0
        assert run_cli("synth", "--config", cfg, "--out", tmp_path / "b", "--seed", 2) == 0
        a = (tmp_path / "a" / "images" / "live_00000.ppm").read_bytes()
        b = (tmp_path / "b" / "images" / "live_00000.ppm").read_bytes()
        assert a != b


class TestTrainEval:
    def test_train_writes_run_dir(self, corpus_dir, capsys):
        tmp_path, cfg, corpus = corpus_dir
        run = tmp_path / "run"
        assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--out", run) == 0
        for name in ("checkpoint.bin", "train_log.tsv", "config.json", "run_manifest.json",
                     "scores_eval.csv", "report.txt", "metrics.json", "vocab.txt",
                     "class_prompts.yaml"):
            assert (run / name).exists(), name
        manifest = json.loads((run / "run_manifest.json").read_text())
        assert manifest["seed"] == 3
        assert "checkpoint.bin" in manifest["files"]
        assert "inputs_hash" in manifest

    def test_train_determinism_same_seed(self, corpus_dir):
        tmp_path, cfg, corpus = corpus_dir
        for name in ("r1", "r2"):
            assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                           "--out", tmp_path / name, "--seed", 7) == 0
        a = (tmp_path / "r1" / "checkpoint.bin").read_bytes()
        b = (tmp_path / "r2" / "checkpoint.bin").read_bytes()
        assert a == b
        assert (tmp_path / "r1" / "train_log.tsv").read_bytes() == \
               (tmp_path / "r2" / "train_log.tsv").read_bytes()

    def test_no_scpg_flag_removes_context_keys(self, corpus_dir):
        tmp_path, cfg, corpus = corpus_dir
        run = tmp_path / "run_noscpg"
        assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--out", run, "--no-scpg", "--no-caa") == 0
        keys = [k for k, _ in checkpoint_keys(run / "checkpoint.bin")]
        assert not any(k.startswith("context.") for k in keys)
        doc = json.loads((run / "config.json").read_text())
        assert doc["train"]["scpg"] is False and doc["train"]["caa"] is False

    def test_train_refuses_overwrite(self, corpus_dir, capsys):
        tmp_path, cfg, corpus = corpus_dir
        run = tmp_path / "run_ow"
        assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--out", run) == 0
        assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--out", run) == 2
        assert capsys.readouterr().err.startswith("error: OVERWRITE:")

    def test_eval_writes_scores_and_report(self, corpus_dir, capsys):
        tmp_path, cfg, corpus = corpus_dir
        run = tmp_path / "run_eval"
        assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--out", run) == 0
        capsys.readouterr()
        assert run_cli("eval", run, corpus / "manifest.csv", "--out", tmp_path / "ev") == 0
        out = capsys.readouterr().out
        assert "Method" in out and "ACC" in out
        assert (tmp_path / "ev" / "scores.csv").exists()
        assert (tmp_path / "ev" / "roc.csv").exists()
        header = (tmp_path / "ev" / "scores.csv").read_text().splitlines()[0]
        assert header == "id,label,family,score,score_phys,score_dig"

    def test_eval_missing_run_dir_errors(self, corpus_dir, capsys):
        tmp_path, cfg, corpus = corpus_dir
        assert run_cli("eval", tmp_path / "nope", corpus / "manifest.csv") == 2
        assert capsys.readouterr().err.startswith("error: INPUT:")


class TestCluster:
    def test_fresh_cluster_report(self, workdir, capsys):
        tmp_path, cfg = workdir
        assert run_cli("cluster", "--config", cfg) == 0
        out = capsys.readouterr().out
        assert "context clusters: K=2" in out
        assert "inertia" in out and "nearest=" in out

    def test_cluster_from_run(self, corpus_dir, capsys):
        tmp_path, cfg, corpus = corpus_dir
        run = tmp_path / "run_cl"
        assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--out", run) == 0
        capsys.readouterr()
        assert run_cli("cluster", "--run", run) == 0
        assert "context clusters" in capsys.readouterr().out


class TestAblate:
    def test_grid_has_exactly_four_rows(self, corpus_dir, capsys, monkeypatch):
        tmp_path, cfg, corpus = corpus_dir
        monkeypatch.setenv("SPLUAD_THREADS", "1")
        assert run_cli("ablate", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--seeds", "1,2", "--out", tmp_path / "ab") == 0
        out = capsys.readouterr().out
        rows = [ln for ln in out.splitlines() if "±" in ln]
        assert len(rows) == 4
        data = json.loads((tmp_path / "ab" / "ablation.json").read_text())
        assert set(data) == {"baseline", "scpg", "caa", "full"}
        assert set(data["full"]) == {"1", "2"}

    def test_parallel_matches_sequential(self, corpus_dir, capsys, monkeypatch):
        tmp_path, cfg, corpus = corpus_dir
        monkeypatch.setenv("SPLUAD_THREADS", "1")
        assert run_cli("ablate", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--seeds", "4", "--out", tmp_path / "seq") == 0
        monkeypatch.setenv("SPLUAD_THREADS", "2")
        assert run_cli("ablate", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--seeds", "4", "--out", tmp_path / "par") == 0
        seq = json.loads((tmp_path / "seq" / "ablation.json").read_text())
        par = json.loads((tmp_path / "par" / "ablation.json").read_text())
        assert seq == par


class TestReport:
    def test_report_with_comparison_rows(self, corpus_dir, capsys):
        tmp_path, cfg, corpus = corpus_dir
        run = tmp_path / "run_rep"
        assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--out", run) == 0
        capsys.readouterr()
        assert run_cli("report", run / "scores_eval.csv", "--name", "mine",
                       "--compare", "prompt-baseline=0.6120,0.6610,0.3980,0.3490") == 0
        out = capsys.readouterr().out
        row = next(ln for ln in out.splitlines() if ln.startswith("prompt-baseline"))
        assert " ".join(row.split()[1:]) == "61.20 66.10 39.80 34.90"

    def test_bad_compare_entry(self, corpus_dir, capsys):
        tmp_path, cfg, corpus = corpus_dir
        run = tmp_path / "run_rep2"
        assert run_cli("train", "--config", cfg, "--manifest", corpus / "manifest.csv",
                       "--out", run) == 0
        capsys.readouterr()
        assert run_cli("report", run / "scores_eval.csv", "--compare", "oops") == 2
        assert capsys.readouterr().err.startswith("error: INPUT:")


class TestErrorContract:
    def test_missing_config_file(self, tmp_path, capsys):
        assert run_cli("synth", "--config", tmp_path / "none.yaml", "--out", tmp_path / "o") == 2
        err = capsys.readouterr().err
        assert err.startswith("error: CONFIG:") and "\n" not in err.strip()

    def test_train_without_manifest(self, workdir, capsys):
        tmp_path, cfg = workdir
        assert run_cli("train", "--config", cfg, "--out", tmp_path / "r") == 2
        assert capsys.readouterr().err.startswith("error: CONFIG:")

    def test_console_entry_point(self, workdir):
        tmp_path, cfg = workdir
        proc = subprocess.run(
            [sys.executable, "-m", "spoofprompt.cli", "synth", "--config", str(cfg),
             "--out", str(tmp_path / "cli_out")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert (tmp_path / "cli_out" / "manifest.csv").exists()
