"""Experiment configuration mirrored field-for-field to a TOML file."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from ..errors import ConfigError
from ..extractor import ATTENTION_KINDS, BackboneConfig, ExtractorConfig
from ..losses import LOSS_KINDS, MetricLossConfig

MODES = ("base", "energy", "soft_adv", "adapt_adv")
SAMPLERS = ("auto", "easy", "hard", "semihard", "npair")
SEED_ENV = "ZSLMETRIC_SEED"


@dataclass
class ExperimentConfig:
    # feature extractor
    input_dim: int = 0
    stage_shapes: list = field(default_factory=lambda: [[16, 2, 2], [16, 2, 2]])
    hidden_dim: int = 16
    activation: str = "relu"
    attention_kind: str = "additive_simple"
    attention_sigma: str = "tanh"
    include_u: bool = False
    multidim_axis: str = "features"
    # metric learning
    loss: str = "triplet_hinge"
    sampler: str = "auto"
    embedding_dim: int = 64
    normalize_embedding: bool = True
    margin: float = 0.01
    contrastive_q: float = 2.0
    angle_deg: float = 45.0
    # adversarial extension
    mode: str = "base"
    smoothing: float = 0.15
    dropout: float = 0.1
    classifier_hidden: int = 0
    l_thresh: float = 1.5
    lambda0: float = 0.5
    lambda_grid: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    energy_weight: float = 0.5
    # optimization
    lr_backbone: float = 1e-4
    lr_embedding: float = 1e-3
    lr_classifier: float = 1e-3
    lr_proxy: float = 0.01
    batch_size: int = 64
    samples_per_class: int = 2
    epochs: int = 30
    seed: int = 0
    # protocol
    train_fraction: float = 0.5
    val_fraction: float = 0.2
    eval_every: int = 1
    ks: list = field(default_factory=lambda: [1, 2, 4, 8])
    # synthetic data
    synth_classes: int = 20
    synth_per_class: int = 50
    synth_noise: float = 1.0
    synth_input_dim: int = 48

    def __post_init__(self):
        self.stage_shapes = [list(map(int, s)) for s in self.stage_shapes]
        self.validate()

    def validate(self) -> None:
        for name in ("lr_backbone", "lr_embedding", "lr_classifier", "lr_proxy"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.samples_per_class < 2:
            raise ConfigError("samples_per_class must be >= 2 (positives are required)")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.sampler not in SAMPLERS:
            raise ConfigError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"attention_kind must be one of {ATTENTION_KINDS}")
        if self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("epochs must be >= 0 and eval_every >= 1")
        if not 0 < self.lambda0 <= 1:
            raise ConfigError("lambda0 must lie in (0, 1]")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in [0, 1)")
        self.metric_loss_config()
        if self.input_dim:
            self.extractor_config()

    # derived configs
    def extractor_config(self) -> ExtractorConfig:
        if not self.input_dim:
            raise ConfigError("input_dim is unresolved")
        bb = BackboneConfig(self.input_dim, self.stage_shapes, self.hidden_dim, self.activation)
        return ExtractorConfig(bb, self.attention_kind, self.attention_sigma, self.include_u,
                               self.multidim_axis)

    def metric_loss_config(self) -> MetricLossConfig:
        kw = {"contrastive": {"Q": self.contrastive_q},
              "triplet_hinge": {"margin": self.margin},
              "angular": {"angle_deg": self.angle_deg},
              "proxy_nca": {"proxy_lr": self.lr_proxy}}.get(self.loss, {})
        return MetricLossConfig(self.loss, **kw)

    def resolved_sampler(self) -> str | None:
        if self.loss == "proxy_nca":
            return None
        if self.sampler != "auto":
            return self.sampler
        return {"triplet_hinge": "semihard", "contrastive": "easy",
                "npair": "npair", "angular": "npair"}[self.loss]

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    # serialization
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    def to_toml(self, path=None) -> str:
        text = tomli_w.dumps(self.to_dict())
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_toml(cls, path, env: bool = True) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = cls.from_dict(data)
        return apply_env(cfg) if env else cfg

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).digest()


def apply_env(cfg: ExperimentConfig) -> ExperimentConfig:
    """Override the seed from ``ZSLMETRIC_SEED`` when set."""
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return cfg
    try:
        return cfg.replace(seed=int(raw))
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None
