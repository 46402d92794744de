import json
import os
import subprocess
import sys

import pytest

from opensetlt.cli import EVAL_KEYS, SPLIT_KEYS, SYNTH_KEYS, main
from opensetlt.config import KEY_DOCS

TINY = {"synth_max_count": 60, "synth_num_classes": 5, "seen_classes": [0, 1, 2], "epochs": 2,
        "synth_imbalance_ratio": 6.0, "feature_dim": 16, "embed_dim": 16}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(TINY))
    return path


@pytest.mark.parametrize("command, keys", [
    ("make-split", SPLIT_KEYS), ("synth-data", SYNTH_KEYS), ("train", list(KEY_DOCS)),
    ("eval", EVAL_KEYS), ("report", EVAL_KEYS), ("etf-check", []),
])
def test_help_documents_consumed_keys(command, keys, capsys):
    with pytest.raises(SystemExit) as exc:
        main([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for key in keys:
        assert key in text


def test_unknown_subcommand_rejected(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["launch", "--out", str(tmp_path / "x")])
    assert exc.value.code == 2
    assert not (tmp_path / "x").exists()


def test_etf_check(capsys):
    assert main(["etf-check", "--dim", "128", "--classes", "7"]) == 0
    out = capsys.readouterr().out
    assert "max_norm_deviation" in out and "max_angle_deviation" in out and "PASS" in out


def test_etf_check_dimension_error(capsys):
    assert main(["etf-check", "--dim", "3", "--classes", "5"]) == 2
    assert "dimension error" in capsys.readouterr().err


def test_config_error_lists_every_key(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"epochs": 0, "lr": -1, "colour": "red"}))
    assert main(["train", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    for key in ("epochs", "lr", "colour"):
        assert key in err


def test_missing_config_file(tmp_path, capsys):
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert "not found" in capsys.readouterr().err


def test_missing_dataset_archive(tmp_path, capsys):
    code = main(["make-split", "--dataset", "absent.npz", "--out", str(tmp_path / "o")])
    assert code == 3
    assert "dataset error" in capsys.readouterr().err


def test_data_root_env(tmp_path, monkeypatch, config):
    monkeypatch.chdir(tmp_path)
    assert main(["synth-data", "--config", str(config), "--out", str(tmp_path / "data")]) == 0
    monkeypatch.setenv("OPENSETLT_DATA_ROOT", str(tmp_path / "data"))
    assert main(["make-split", "--config", str(config), "--dataset", "dataset.npz",
                 "--out", str(tmp_path / "split")]) == 0
    manifest = json.loads((tmp_path / "split" / "manifest.json").read_text())
    assert manifest["seen_classes"] == [0, 1, 2]


def test_split_flags_override(tmp_path, config):
    out = tmp_path / "s"
    assert main(["make-split", "--config", str(config), "--seen-classes", "1,3",
                 "--label-fraction", "0.5", "--seed", "4", "--out", str(out)]) == 0
    m = json.loads((out / "manifest.json").read_text())
    assert m["seen_classes"] == [1, 3] and m["label_fraction"] == 0.5 and m["seed"] == 4


def test_train_report_and_outputs_stay_in_out_dir(tmp_path, monkeypatch, config, capsys):
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    run, rep = tmp_path / "run", tmp_path / "rep"
    assert main(["train", "--config", str(config), "--out", str(run)]) == 0
    assert main(["report", "--checkpoint", str(run / "checkpoint_best.npz"), "--out", str(rep)]) == 0
    out = capsys.readouterr().out
    assert "===== metrics =====" in out and "closed_set_acc," in out
    assert sorted(p.name for p in rep.iterdir()) == [
        "confusion.csv", "confusion.png", "metrics.json", "per_class_acc.png", "training_curves.png"]
    metrics = json.loads((rep / "metrics.json").read_text())
    assert metrics["config"]["config_digest"]
    assert list(work.iterdir()) == []
    assert sorted(p.name for p in tmp_path.iterdir()) == ["cfg.json", "cwd", "rep", "run"]


def test_eval_class_count_mismatch(tmp_path, config, capsys):
    run = tmp_path / "run"
    assert main(["train", "--config", str(config), "--out", str(run)]) == 0
    assert main(["make-split", "--config", str(config), "--seen-classes", "0,1",
                 "--out", str(tmp_path / "other")]) == 0
    code = main(["eval", "--checkpoint", str(run / "checkpoint_best.npz"),
                 "--manifest", str(tmp_path / "other" / "manifest.json"), "--out", str(tmp_path / "ev")])
    assert code == 4
    err = capsys.readouterr().err
    assert "mismatch" in err and "seen classes" in err


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "opensetlt.cli", "etf-check", "--dim", "8", "--classes", "3"],
                          capture_output=True, text=True, env=dict(os.environ))
    assert proc.returncode == 0 and "PASS" in proc.stdout
