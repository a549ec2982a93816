import pytest

from zslmetric.errors import ConfigError
from zslmetric.harness.config import SEED_ENV, ExperimentConfig, apply_env


def test_toml_roundtrip(tmp_path):
    cfg = ExperimentConfig(mode="adapt_adv", lambda0=0.3, stage_shapes=[[4, 2, 1]], ks=[1, 4])
    path = tmp_path / "c.toml"
    cfg.to_toml(path)
    back = ExperimentConfig.from_toml(path, env=False)
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_unknown_key_and_bad_toml(tmp_path):
    p = tmp_path / "c.toml"
    p.write_text('mode = "base"\nlearning_rate = 0.1\n')
    with pytest.raises(ConfigError, match="learning_rate"):
        ExperimentConfig.from_toml(p)
    p.write_text("mode = \n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_toml(p)


@pytest.mark.parametrize("change", [dict(mode="adv"), dict(loss="hinge"), dict(lr_backbone=0.0),
                                    dict(samples_per_class=1), dict(lambda0=1.5),
                                    dict(sampler="random"), dict(val_fraction=1.0)])
def test_validation(change):
    with pytest.raises(ConfigError):
        ExperimentConfig(**change)


def test_env_seed_and_precedence(tmp_path, monkeypatch):
    p = tmp_path / "c.toml"
    ExperimentConfig(seed=5).to_toml(p)
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert ExperimentConfig.from_toml(p).seed == 5
    monkeypatch.setenv(SEED_ENV, "11")
    cfg = ExperimentConfig.from_toml(p)
    assert cfg.seed == 11
    # an explicit override applied afterwards wins
    assert cfg.replace(seed=2).seed == 2
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        apply_env(ExperimentConfig())


def test_default_learning_rate_ratio():
    cfg = ExperimentConfig()
    assert cfg.lr_embedding == pytest.approx(10 * cfg.lr_backbone)
    assert cfg.margin == 0.01 and cfg.smoothing == 0.15 and cfg.l_thresh == 1.5
