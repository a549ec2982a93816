"""Blocked feature extractor with per-stage attention and inter-module fusion.

A stack of dense stages produces intermediate feature maps of shape
``(C_i, H_i, V_i)`` and a last-hidden vector ``u``.  Each map is read as
``H_i * V_i`` channel vectors ``q_j`` of length ``C_i``; an attention module
scores every ``q_j`` against ``u``, the scores are normalized with a softmax
and used to pool the map into one vector per stage.  The pooled vectors are
concatenated into the final feature.

All functions accept batched input: channel vectors as ``(n, L, C)`` and
``u`` as ``(n, l)``.  Unbatched ``(L, C)`` / ``(l,)`` input is promoted to a
batch of one and the result squeezed back.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, DimensionError
from .gradcore import Tensor

ATTENTION_KINDS = ("multiplicative", "multiplicative_simple", "additive", "additive_simple",
                   "multidim")
SCALAR_KINDS = ATTENTION_KINDS[:4]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


@dataclass
class BackboneConfig:
    input_dim: int
    stage_shapes: list
    hidden_dim: int
    activation: str = "relu"

    def __post_init__(self):
        self.stage_shapes = [tuple(int(v) for v in s) for s in self.stage_shapes]
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("input_dim and hidden_dim must be >= 1")
        if not self.stage_shapes:
            raise ConfigError("backbone needs at least one stage")
        for s in self.stage_shapes:
            if len(s) != 3 or min(s) < 1:
                raise ConfigError(f"stage shape {s} must be three positive extents")
        if self.activation not in ("relu", "tanh", "linear"):
            raise ConfigError(f"activation must be relu, tanh or linear, got {self.activation!r}")

    @property
    def stage_sizes(self) -> list[int]:
        return [c * h * v for c, h, v in self.stage_shapes]


class Backbone:
    """Dense stages: affine map + activation, output viewed as ``C x H x V``."""

    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        fan_in = config.input_dim
        for i, size in enumerate(config.stage_sizes):
            self.params[f"stage{i}.W"] = Tensor(glorot_uniform(rng, fan_in, size, (fan_in, size)),
                                                tracked=True)
            self.params[f"stage{i}.b"] = Tensor(np.zeros(size), tracked=True)
            fan_in = size
        l = config.hidden_dim
        self.params["hidden.W"] = Tensor(glorot_uniform(rng, fan_in, l, (fan_in, l)), tracked=True)
        self.params["hidden.b"] = Tensor(np.zeros(l), tracked=True)

    def __call__(self, x) -> tuple[list[Tensor], Tensor]:
        return self.forward(x)

    def forward(self, x) -> tuple[list[Tensor], Tensor]:
        """Return the stage maps ``(n, C, H, V)`` and ``u`` of shape ``(n, l)``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.ndim == 1
        if single:
            x = gc.reshape(x, (1, -1))
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise ConfigError(f"input of shape {x.shape} does not match "
                              f"input_dim={self.config.input_dim}")
        act = gc.activation(self.config.activation)
        n = x.shape[0]
        h = x
        maps = []
        for i, shape in enumerate(self.config.stage_shapes):
            h = act(_affine(h, self.params[f"stage{i}.W"], self.params[f"stage{i}.b"]))
            maps.append(gc.reshape(h, (n,) + shape))
        u = act(_affine(h, self.params["hidden.W"], self.params["hidden.b"]))
        if single:
            maps = [gc.reshape(m, m.shape[1:]) for m in maps]
            u = gc.reshape(u, u.shape[1:])
        return maps, u


def _affine(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    y = x @ W
    return y + gc.broadcast_to(b, y.shape)


def channel_vectors(feature_map: Tensor) -> Tensor:
    """View ``(n, C, H, V)`` (or ``(C, H, V)``) as ``(n, H*V, C)`` channel vectors."""
    if feature_map.ndim == 3:
        c, h, v = feature_map.shape
        return gc.transpose(gc.reshape(feature_map, (c, h * v)))
    n, c, h, v = feature_map.shape
    return gc.transpose(gc.reshape(feature_map, (n, c, h * v)), (0, 2, 1))


@dataclass
class AttentionParams:
    """Weights of one attention module.

    ``W1`` is ``l x C``; ``W2`` (``l x l``) exists only for the two full
    kinds, ``w`` (length ``l``) only for the additive kinds and ``Wmd``
    (``l x C``) only for multidim.
    """

    kind: str
    W1: Tensor
    W2: Tensor | None = None
    w: Tensor | None = None
    Wmd: Tensor | None = None
    sigma: str = "tanh"
    multidim_axis: str = "features"

    _NEEDS = {
        "multiplicative": {"W2"},
        "multiplicative_simple": set(),
        "additive": {"W2", "w"},
        "additive_simple": {"w"},
        "multidim": {"Wmd"},
    }

    def __post_init__(self):
        if self.kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.kind!r}")
        present = {k for k in ("W2", "w", "Wmd") if getattr(self, k) is not None}
        if present != self._NEEDS[self.kind]:
            raise ConfigError(f"attention kind {self.kind!r} needs {sorted(self._NEEDS[self.kind])}, "
                              f"got {sorted(present)}")
        if self.multidim_axis not in ("features", "locations"):
            raise ConfigError("multidim_axis must be 'features' or 'locations'")

    @classmethod
    def init(cls, kind: str, channels: int, hidden_dim: int, rng: np.random.Generator,
             sigma: str = "tanh", multidim_axis: str = "features") -> "AttentionParams":
        l, c = hidden_dim, channels
        W1 = Tensor(glorot_uniform(rng, c, l, (l, c)), tracked=True)
        W2 = w = Wmd = None
        if kind in ("multiplicative", "additive"):
            W2 = Tensor(glorot_uniform(rng, l, l, (l, l)), tracked=True)
        if kind in ("additive", "additive_simple"):
            w = Tensor(glorot_uniform(rng, l, 1, (l,)), tracked=True)
        if kind == "multidim":
            Wmd = Tensor(glorot_uniform(rng, l, c, (l, c)), tracked=True)
        return cls(kind, W1, W2=W2, w=w, Wmd=Wmd, sigma=sigma, multidim_axis=multidim_axis)

    def named_params(self) -> dict[str, Tensor]:
        return {k: getattr(self, k) for k in ("W1", "W2", "w", "Wmd") if getattr(self, k) is not None}


def _batched(q: Tensor, u: Tensor):
    if q.ndim == 2:
        return gc.reshape(q, (1,) + q.shape), gc.reshape(u, (1,) + u.shape), True
    return q, u, False


def attention_scores(q: Tensor, u: Tensor, params: AttentionParams) -> Tensor:
    """Score each channel vector against ``u``.

    Scalar kinds return ``(n, L)``; multidim returns ``(n, L, C)``.
    """
    q, u, single = _batched(q, u)
    n, L, C = q.shape
    l = params.W1.shape[0]
    if params.W1.shape != (l, C) or u.shape != (n, l):
        raise DimensionError(f"attention: W1 {params.W1.shape}, channels {q.shape}, u {u.shape}")
    projected = q @ gc.transpose(params.W1)                           # (n, L, l)
    ref = u @ gc.transpose(params.W2) if params.W2 is not None else u  # (n, l)
    kind = params.kind
    if kind.startswith("multiplicative"):
        scores = gc.reshape(projected @ gc.reshape(ref, (n, l, 1)), (n, L))
    else:
        sigma = gc.activation(params.sigma)
        hidden = sigma(projected + gc.broadcast_to(gc.reshape(ref, (n, 1, l)), (n, L, l)))
        scores = hidden @ params.w if kind != "multidim" else hidden @ params.Wmd
    if single:
        scores = gc.reshape(scores, scores.shape[1:])
    return scores


def normalize_scores(scores: Tensor, multidim: bool = False, axis: str = "features") -> Tensor:
    """Softmax over locations (scalar scores) or over features per location (multidim)."""
    if not multidim:
        return gc.softmax(scores, axis=-1)
    return gc.softmax(scores, axis=-1 if axis == "features" else -2)


def attend_pool(q: Tensor, weights: Tensor) -> Tensor:
    """Weighted sum of channel vectors: ``(n, L, C)`` x weights -> ``(n, C)``."""
    single = q.ndim == 2
    if single:
        q = gc.reshape(q, (1,) + q.shape)
        weights = gc.reshape(weights, (1,) + weights.shape)
    n, L, C = q.shape
    if weights.shape == (n, L):
        pooled = gc.reshape(gc.reshape(weights, (n, 1, L)) @ q, (n, C))
    elif weights.shape == (n, L, C):
        pooled = gc.sum(weights * q, axis=1)
    else:
        raise DimensionError(f"attend_pool: weights {weights.shape} do not fit channels {q.shape}")
    return gc.reshape(pooled, (C,)) if single else pooled


def fuse(attended: Sequence[Tensor], u: Tensor, include_u: bool = False) -> Tensor:
    parts = list(attended) + ([u] if include_u else [])
    return gc.concat(parts, axis=-1)


@dataclass
class ExtractorConfig:
    backbone: BackboneConfig
    attention_kind: str = "additive_simple"
    sigma: str = "tanh"
    include_u: bool = False
    multidim_axis: str = "features"

    def __post_init__(self):
        if self.attention_kind not in ATTENTION_KINDS:
            raise ConfigError(f"unknown attention kind {self.attention_kind!r}")

    @property
    def feature_dim(self) -> int:
        d = sum(c for c, _, _ in self.backbone.stage_shapes)
        return d + (self.backbone.hidden_dim if self.include_u else 0)


@dataclass
class ExtractorOutput:
    features: Tensor
    weights: list = field(default_factory=list)
    u: Tensor | None = None


class FeatureExtractor:
    """Backbone -> per-stage attention -> fusion."""

    def __init__(self, config: ExtractorConfig, rng: np.random.Generator):
        self.config = config
        self.backbone = Backbone(config.backbone, rng)
        self.attention = [
            AttentionParams.init(config.attention_kind, c, config.backbone.hidden_dim, rng,
                                 sigma=config.sigma, multidim_axis=config.multidim_axis)
            for c, _, _ in config.backbone.stage_shapes
        ]

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def named_params(self) -> dict[str, Tensor]:
        out = dict(self.backbone.params)
        for i, att in enumerate(self.attention):
            out.update({f"att{i}.{k}": v for k, v in att.named_params().items()})
        return out

    def __call__(self, x) -> Tensor:
        return self.forward(x).features

    def forward(self, x) -> ExtractorOutput:
        maps, u = self.backbone(x)
        single = u.ndim == 1
        if single:
            maps = [gc.reshape(m, (1,) + m.shape) for m in maps]
            u = gc.reshape(u, (1,) + u.shape)
        pooled, weights = [], []
        for fmap, att in zip(maps, self.attention):
            q = channel_vectors(fmap)
            w = normalize_scores(attention_scores(q, u, att), multidim=att.kind == "multidim",
                                 axis=att.multidim_axis)
            pooled.append(attend_pool(q, w))
            weights.append(w)
        f = fuse(pooled, u, self.config.include_u)
        if single:
            f = gc.reshape(f, f.shape[1:])
            weights = [gc.reshape(w, w.shape[1:]) for w in weights]
            u = gc.reshape(u, u.shape[1:])
        return ExtractorOutput(f, weights, u)


def export_attention(weights, geometry: tuple[int, int], path) -> tuple[str, str]:
    """Write location weights as an ``H x V`` CSV grid and an 8-bit binary PGM.

    ``path`` is a stem; ``.csv`` and ``.pgm`` are appended.  The PGM maps the
    minimum weight to 0 and the maximum to 255; a constant map is written as
    mid-gray.
    """
    w = np.asarray(weights.data if isinstance(weights, Tensor) else weights, dtype=np.float64)
    H, V = geometry
    if w.size != H * V:
        raise DimensionError(f"{w.size} weights cannot fill a {H}x{V} grid")
    grid = w.reshape(H, V)
    stem = os.fspath(path)
    csv_path, pgm_path = stem + ".csv", stem + ".pgm"
    with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
        for row in grid:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        pixels = np.rint((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pixels = np.full((H, V), 128, dtype=np.uint8)
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{V} {H}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return csv_path, pgm_path


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) PGM written by :func:`export_attention`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != b"P5" or maxval != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    data = np.frombuffer(raw[pos + 1:pos + 1 + width * height], dtype=np.uint8)
    return data.reshape(height, width)
