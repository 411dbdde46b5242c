import json
import subprocess
import sys

import numpy as np
import pytest

from cect.cli import exit_code, run
from cect.config import DEFAULT_GROUPS
from cect.errors import ConfigError, IngestionError, NonFiniteError, ValidationError
from cect.experiments import SWEEP_COLUMNS
from cect.reporting import read_csv

MICRO = ["--preset", "micro", "-q"]


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def resolved(out):
    return dict(line.split(" = ", 1) for line in (out / "config.resolved").read_text().splitlines())


# exit codes ----------------------------------------------------------------------------

@pytest.mark.parametrize("exc,code", [
    (ValidationError("x"), 1), (ConfigError("x"), 1), (ValueError("x"), 1),
    (NonFiniteError("x"), 2), (FloatingPointError("x"), 2), (RuntimeError("x"), 2),
    (IngestionError("x"), 3), (FileNotFoundError("x"), 3), (PermissionError("x"), 3),
])
def test_exit_code_mapping(exc, code):
    assert exit_code(exc) == code


def test_unknown_flag_is_a_usage_error(tmp_path, capsys):
    assert run(["train", "--bogus", "--out", str(tmp_path)]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_unknown_command_is_a_usage_error():
    assert run(["frobnicate"]) == 1


def test_missing_dataset_is_an_ingestion_error(tmp_path, capsys):
    assert run(["train", *MICRO, "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 3
    assert "nope" in capsys.readouterr().err


def test_divergent_training_is_a_numeric_error(tmp_path, capsys):
    argv = ["train", *MICRO, "--set", "train.epochs=2", "--set", "train.initial_lr=1e12", "--out", str(tmp_path)]
    assert run(argv) == 2
    assert "non-finite" in capsys.readouterr().err


def test_process_exit_status(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "cect", "synth", "--threads", "1", "--set", "seed=x",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 1 and "seed" in proc.stderr


# configuration ---------------------------------------------------------------------------

def test_empty_config_file_gives_reference_defaults(tmp_path):
    cfg = tmp_path / "empty.cfg"
    cfg.write_text("")
    assert run(["synth", "--config", str(cfg), "--n", "1", "--out", str(tmp_path / "o"), "-q"]) == 0
    r = resolved(tmp_path / "o")
    assert r["train.initial_lr"] == "0.003" and r["train.plateau_factor"] == "0.5"
    assert r["train.plateau_patience"] == "5" and r["model.input_resolution"] == "224"
    assert r["data.ratios"] == "0.8,0.1,0.1"


def test_coefficient_validation(tmp_path, capsys):
    ok = ["synth", *MICRO, "--n", "1", "--set", "model.coefficients=0.8,0.1,0.1", "--out", str(tmp_path / "a")]
    assert run(ok) == 0
    assert resolved(tmp_path / "a")["model.coefficients"] == "0.8,0.1,0.1"
    bad = ["synth", *MICRO, "--n", "1", "--set", "model.coefficients=0.5,0.4,0.4", "--out", str(tmp_path / "b")]
    assert run(bad) == 1
    assert "sum to 1" in capsys.readouterr().err


def test_seed_flag_overrides_config(tmp_path):
    assert run(["synth", *MICRO, "--n", "1", "--seed", "41", "--out", str(tmp_path)]) == 0
    assert resolved(tmp_path)["seed"] == "41"


def test_out_falls_back_to_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("CECT_OUT", str(tmp_path / "env"))
    assert run(["synth", *MICRO, "--n", "1"]) == 0
    assert (tmp_path / "env" / "config.resolved").exists()
    monkeypatch.delenv("CECT_OUT")
    assert run(["synth", *MICRO, "--n", "1"]) == 1


# commands --------------------------------------------------------------------------------

def test_synth_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run(["synth", "--n", "16", "--out", str(tmp_path / d), "--seed", "7", "-q"]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b
    assert sum(k.endswith(".pgm") for k in a) == 32


def test_train_writes_artifacts_and_resume_matches(tmp_path):
    base = ["train", *MICRO]
    assert run([*base, "--set", "train.epochs=1", "--out", str(tmp_path / "r")]) == 0
    assert run([*base, "--set", "train.epochs=2", "--resume", "--out", str(tmp_path / "r")]) == 0
    assert run([*base, "--set", "train.epochs=2", "--out", str(tmp_path / "s")]) == 0
    for name in ("loss_trace.csv", "final.ckpt", "test_metrics.json"):
        assert (tmp_path / "r" / name).read_bytes() == (tmp_path / "s" / name).read_bytes(), name
    report = json.loads((tmp_path / "s" / "report.json").read_text())
    assert report["epochs_completed"] == 2
    assert (tmp_path / "s" / "test_metrics_confusion.svg").read_text().startswith("<?xml")


def test_eval_reproduces_train_metrics(tmp_path):
    assert run(["train", *MICRO, "--set", "train.epochs=1", "--out", str(tmp_path)]) == 0
    assert run(["eval", *MICRO, "--checkpoint", str(tmp_path / "final.ckpt"), "--out", str(tmp_path)]) == 0
    train = json.loads((tmp_path / "test_metrics.json").read_text())
    ev = json.loads((tmp_path / "eval_metrics.json").read_text())
    assert train == ev


def test_eval_rejects_checkpoint_from_other_config(tmp_path):
    assert run(["train", *MICRO, "--set", "train.epochs=1", "--out", str(tmp_path)]) == 0
    argv = ["eval", "--preset", "tiny", "-q", "--checkpoint", str(tmp_path / "final.ckpt"), "--out", str(tmp_path)]
    assert run(argv) == 1


def test_sweep_emits_seven_groups(tmp_path):
    assert run(["sweep", *MICRO, "--set", "train.epochs=1", "--out", str(tmp_path)]) == 0
    header, rows = read_csv(tmp_path / "sweep.csv")
    assert tuple(header) == SWEEP_COLUMNS and len(rows) == 7
    got = [(r["alpha"], r["beta"], r["gamma"]) for r in rows]
    np.testing.assert_allclose(got, [g.as_tuple() for g in DEFAULT_GROUPS])


def test_embed_writes_features_and_map(tmp_path):
    assert run(["embed", *MICRO, "--set", "data.synth_n=12", "--out", str(tmp_path)]) == 0
    _, feats = read_csv(tmp_path / "embeddings.csv")
    header, pts = read_csv(tmp_path / "tsne.csv")
    assert header == ["x", "y", "label", "subset"] and len(pts) == len(feats)
    assert {p["subset"] for p in pts} == {"validation", "test"}


def test_gradcheck_command(tmp_path):
    assert run(["gradcheck", *MICRO, "--draws", "1", "--coords", "1", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["passed"] and report["max_rel_err"] < 1e-3
