import math
import warnings

import numpy as np
import pytest

from zslmetric.adversary import lambda_schedule
from zslmetric.errors import DivergenceError, ProtocolError
from zslmetric.harness import ExperimentConfig, evaluate, synth_dataset, train
from zslmetric.harness.cli import synth_for
from zslmetric.harness.model import ZslModel
from zslmetric.harness.training import balanced_batches, read_log
from zslmetric.metrics import chance_recall_at_1


def small(**kw):
    base = dict(stage_shapes=[[4, 2, 1]], hidden_dim=8, embedding_dim=8, batch_size=12, epochs=3)
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="module")
def data():
    return synth_dataset(6, 10, 0.5, np.random.default_rng(0), input_dim=12)


def test_base_log_has_no_lambda(tmp_path, data):
    train(small(), data, out_dir=tmp_path)
    header = (tmp_path / "train_log.csv").read_text().splitlines()[0]
    assert header == "epoch,l_m"


def test_adaptive_log_replays_schedule(tmp_path, data):
    cfg = small(mode="adapt_adv", epochs=4)
    train(cfg, data, out_dir=tmp_path)
    rows = read_log(tmp_path / "train_log.csv")
    assert rows[0]["lambda"] == lambda_schedule(math.log(3), cfg.l_thresh, cfg.lambda0)
    for prev, row in zip(rows, rows[1:]):
        assert row["lambda"] == prev["lambda_next"]
    for row in rows:
        assert row["lambda_next"] == lambda_schedule(row["l_c"], cfg.l_thresh, cfg.lambda0)
        assert abs(row["lambda"]) <= cfg.lambda0


@pytest.mark.parametrize("mode", ["base", "energy", "soft_adv", "adapt_adv"])
def test_training_is_deterministic(tmp_path, data, mode):
    train(small(mode=mode, epochs=2), data, out_dir=tmp_path / "a")
    train(small(mode=mode, epochs=2), data, out_dir=tmp_path / "b")
    for name in ("metrics.csv", "train_log.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_balanced_batches(data):
    rng = np.random.default_rng(0)
    idx = np.arange(30)
    for b in balanced_batches(idx, data.labels, 12, 2, rng):
        _, counts = np.unique(data.labels[b], return_counts=True)
        assert counts.min() >= 2 and set(b) <= set(idx)


def test_split_disjoint_and_eval_guard(data):
    res = train(small(epochs=1), data)
    assert not set(res.split.train_classes) & set(res.split.test_classes)
    assert not set(data.labels[res.split.train_idx]) & set(data.labels[res.split.test_idx])
    with pytest.raises(ProtocolError):
        evaluate(res.model, data, res.split.train_idx)


def test_divergence_is_reported(data):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(DivergenceError) as info:
            train(small(lr_backbone=1e300, lr_embedding=1e300), data)
    assert info.value.epoch >= 1


def test_untrained_model_near_chance():
    # heavy noise: at the default level random projections already keep the clusters
    gaps = []
    for seed in range(3):
        cfg = ExperimentConfig(seed=seed, synth_noise=5.0)
        ds = synth_for(cfg)
        res = train(cfg.replace(epochs=0), ds)
        model = ZslModel(cfg.replace(input_dim=ds.input_dim), res.split.train_classes)
        rep = evaluate(model, ds, res.split.test_idx)
        gaps.append(rep.recall_at[1] - chance_recall_at_1(ds.labels[res.split.test_idx]))
    assert abs(float(np.mean(gaps))) < 0.05
