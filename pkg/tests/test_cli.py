import csv
import json

import numpy as np
import pytest

from zslmetric.harness.cli import main
from zslmetric.harness.config import ExperimentConfig

SMALL = dict(stage_shapes=[[4, 2, 2]], hidden_dim=8, embedding_dim=8, batch_size=12, epochs=2,
             synth_classes=6, synth_per_class=20, synth_input_dim=12, lambda_grid=[0.1, 0.5])


@pytest.fixture
def cfg_path(tmp_path, monkeypatch):
    monkeypatch.delenv("ZSLMETRIC_SEED", raising=False)
    path = tmp_path / "cfg.toml"
    ExperimentConfig(**SMALL).to_toml(path)
    return str(path)


def test_selftest_exits_zero():
    assert main(["selftest", "-q"]) == 0


def test_train_eval_and_export(tmp_path, cfg_path, capsys):
    out = tmp_path / "run"
    assert main(["train", "--config", cfg_path, "--data", "synth", "--mode", "adapt_adv",
                 "--out", str(out)]) == 0
    for name in ("metrics.csv", "train_log.csv", "model.bin", "config.toml", "report.json"):
        assert (out / name).exists()
    printed = json.loads(capsys.readouterr().out)
    assert printed == json.loads((out / "report.json").read_text())
    assert main(["eval", "--model", str(out / "model.bin"), "--data", "synth", "--ks", "1,2"]) == 0
    assert "recall_at" in json.loads(capsys.readouterr().out)
    np.save(tmp_path / "x.npy", np.zeros((2, 12)))
    assert main(["export-attn", "--model", str(out / "model.bin"), "--input",
                 str(tmp_path / "x.npy"), "--out", str(tmp_path / "attn")]) == 0
    heat = np.loadtxt(tmp_path / "attn" / "sample1_stage0.csv", delimiter=",", ndmin=2)
    assert heat.shape == (2, 2) and abs(heat.sum() - 1) < 1e-9


def test_grid_row_count(tmp_path, cfg_path):
    out = tmp_path / "grid.csv"
    assert main(["grid", "--config", cfg_path, "--seeds", "0,1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 4
    assert rows[0].keys() == {"lambda0", "seed", "nmi", "r@1", "r@2", "r@4", "r@8", "knn_acc"}


def test_exit_codes(tmp_path, cfg_path, capsys):
    assert main(["train", "--no-such-flag"]) == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("nonsense_key = 1\n")
    assert main(["train", "--config", str(bad), "--data", "synth"]) == 1
    assert main(["eval", "--model", str(tmp_path / "missing.bin"), "--data", "synth"]) == 2
    assert main(["train", "--config", cfg_path, "--data", "idx:/nope,/nope"]) == 2
    err = capsys.readouterr().err
    assert "config error" in err and "error:" in err
