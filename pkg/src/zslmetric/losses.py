"""Metric losses over sampled tuples, the energy-confusion term and the embedding layer.

Per-tuple functions take single embedding vectors; the ``*_batch`` variants
take a full embedding matrix plus index arrays and return the mean loss, which
is what the training loop uses.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ConfigError, ContractError, ParameterError
from .extractor import glorot_uniform
from .gradcore import Tensor
from .tuples import NTupleSet, TripletSet

LOSS_KINDS = ("contrastive", "triplet_hinge", "npair", "angular", "proxy_nca")


@dataclass
class MetricLossConfig:
    kind: str = "triplet_hinge"
    margin: float | None = None
    Q: float | None = None
    angle_deg: float | None = None
    proxy_lr: float | None = None

    _FIELDS = {
        "contrastive": ("Q",),
        "triplet_hinge": ("margin",),
        "npair": (),
        "angular": ("angle_deg",),
        "proxy_nca": ("proxy_lr",),
    }
    _DEFAULTS = {"margin": 0.01, "Q": 2.0, "angle_deg": 45.0, "proxy_lr": 0.01}

    def __post_init__(self):
        if self.kind not in self._FIELDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}")
        needed = self._FIELDS[self.kind]
        for name in ("margin", "Q", "angle_deg", "proxy_lr"):
            value = getattr(self, name)
            if name in needed and value is None:
                setattr(self, name, self._DEFAULTS[name])
            elif name not in needed and value is not None:
                raise ConfigError(f"loss {self.kind!r} does not take {name!r}")


class EmbeddingLayer:
    """Affine map to the embedding space, optionally L2-normalized."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, normalize: bool = True):
        self.normalize = normalize
        self.params = {
            "W": Tensor(glorot_uniform(rng, in_dim, out_dim, (in_dim, out_dim)), tracked=True),
            "b": Tensor(np.zeros(out_dim), tracked=True),
        }

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def __call__(self, f: Tensor) -> Tensor:
        y = f @ self.params["W"]
        y = y + gc.broadcast_to(self.params["b"], y.shape)
        return gc.l2_normalize(y, axis=-1) if self.normalize else y


def _dist(a: Tensor, b: Tensor) -> Tensor:
    return gc.norm(a - b, axis=-1)


def contrastive_loss(e1: Tensor, e2: Tensor, Y, Q: float = 2.0) -> Tensor:
    """``(1-Y) 2/Q E^2 + Y 2Q exp(-2.77 E / Q)``; ``Y = 0`` marks a genuine pair.

    Works elementwise when ``e1``/``e2`` are row-aligned matrices and ``Y`` a
    vector; the result then has one entry per row.
    """
    if not Q > 0:
        raise ParameterError(f"Q must be > 0, got {Q}")
    E = _dist(e1, e2)
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != E.shape:
        Y = np.broadcast_to(Y, E.shape).copy()
    genuine = gc.mul(Tensor(1.0 - Y), gc.mul(2.0 / Q, gc.mul(E, E)))
    impostor = gc.mul(Tensor(Y), gc.mul(2.0 * Q, gc.exp(gc.mul(-2.77 / Q, E))))
    return genuine + impostor


def triplet_hinge(a: Tensor, p: Tensor, n: Tensor, margin: float = 0.01) -> Tensor:
    """``[margin - (d- - d+)]_+`` with Euclidean distances."""
    if not margin > 0:
        raise ParameterError(f"margin must be > 0, got {margin}")
    d_pos = _dist(a, p)
    d_neg = _dist(a, n)
    return gc.relu(gc.sub(margin, d_neg - d_pos))


def _log1p_sum_exp(z: Tensor) -> Tensor:
    """``ln(1 + sum_j exp(z_j))`` along the last axis, computed stably."""
    zero = Tensor(np.zeros(z.shape[:-1] + (1,)))
    return gc.logsumexp(gc.concat([zero, z], axis=-1), axis=-1)


def npair_loss(anchor: Tensor, positive: Tensor, negatives: Tensor) -> Tensor:
    """``ln(1 + sum_j exp(a.n_j - a.p))`` with dot-product similarities.

    ``negatives`` is ``(N-1, d)`` for one tuple, or ``(k, N-1, d)`` with
    ``(k, d)`` anchors/positives for a batch of tuples.
    """
    if negatives.shape[-2] < 1:
        raise ContractError("n-pair loss needs at least one negative")
    s_pos, s_neg = _tuple_similarities(anchor, positive, negatives)
    m = s_neg.shape[-1]
    diff = s_neg - gc.broadcast_to(gc.reshape(s_pos, s_pos.shape + (1,)), s_pos.shape + (m,))
    return _log1p_sum_exp(diff)


def _tuple_similarities(anchor, positive, negatives):
    s_pos = gc.sum(anchor * positive, axis=-1)
    if negatives.ndim == 2:
        s_neg = negatives @ anchor
    else:
        k, m, d = negatives.shape
        s_neg = gc.reshape(negatives @ gc.reshape(anchor, (k, d, 1)), (k, m))
    return s_pos, s_neg


def angular_coefficients(angle_deg: float) -> tuple[float, float]:
    """Coefficients ``(4 tan^2, 2 (1 + tan^2))`` of the angular objective."""
    if not 0.0 < angle_deg < 90.0:
        raise ParameterError(f"angle must lie in (0, 90) degrees, got {angle_deg}")
    t2 = math.tan(math.radians(angle_deg)) ** 2
    return 4.0 * t2, 2.0 * (1.0 + t2)


def angular_exponents(anchor: Tensor, positive: Tensor, negatives: Tensor,
                      angle_deg: float = 45.0) -> Tensor:
    """``4 tan^2 (a+p).n_j - 2 (1+tan^2) a.p`` for every negative."""
    c_neg, c_pos = angular_coefficients(angle_deg)
    s_pos = gc.sum(anchor * positive, axis=-1)
    ap = anchor + positive
    if negatives.ndim == 2:
        cross = negatives @ ap
    else:
        k, m, d = negatives.shape
        cross = gc.reshape(negatives @ gc.reshape(ap, (k, d, 1)), (k, m))
    m = cross.shape[-1]
    pos_term = gc.broadcast_to(gc.reshape(s_pos, s_pos.shape + (1,)), s_pos.shape + (m,))
    return gc.mul(c_neg, cross) - gc.mul(c_pos, pos_term)


def angular_loss(anchor: Tensor, positive: Tensor, negatives: Tensor,
                 angle_deg: float = 45.0) -> Tensor:
    """N-pair form of the angular loss: ``ln(1 + sum_j exp(exponent_j))``."""
    return _log1p_sum_exp(angular_exponents(anchor, positive, negatives, angle_deg))


def proxy_nca_loss(f: Tensor, y, proxies: Tensor) -> Tensor:
    """``-ln(exp(-d(f, p_y)^2) / sum_{z != y} exp(-d(f, p_z)^2))``.

    Both ``f`` and the proxy rows are L2-normalized first.  ``f`` may be a
    single vector with an integer ``y`` or a ``(k, d)`` matrix with ``k``
    labels; the batched form returns one loss per row.
    """
    C = proxies.shape[0]
    ys = np.atleast_1d(np.asarray(y))
    if C < 2:
        raise ContractError("proxy-NCA needs at least two proxies")
    if ys.size and (ys.min() < 0 or ys.max() >= C or not np.issubdtype(ys.dtype, np.integer)):
        raise ContractError(f"class label outside proxy range [0, {C})")
    single = f.ndim == 1
    F = gc.l2_normalize(gc.reshape(f, (1, -1)) if single else f, axis=-1)
    P = gc.l2_normalize(proxies, axis=-1)
    k, d = F.shape
    diff = gc.broadcast_to(gc.reshape(F, (k, 1, d)), (k, C, d)) - \
        gc.broadcast_to(gc.reshape(P, (1, C, d)), (k, C, d))
    sq = gc.sqnorm(diff, axis=-1)                                 # (k, C)
    d_pos = gc.take_along(sq, ys)
    others = np.array([[z for z in range(C) if z != yi] for yi in ys], dtype=np.intp)
    neg = gc.neg(_take_cols(sq, others))                          # (k, C-1)
    loss = d_pos + gc.logsumexp(neg, axis=-1)
    return gc.reshape(loss, ()) if single else loss


def _take_cols(x: Tensor, cols: np.ndarray) -> Tensor:
    k, m = cols.shape
    flat = gc.reshape(x, (-1,))
    idx = (np.arange(k)[:, None] * x.shape[1] + cols).reshape(-1)
    return gc.reshape(gc.take_rows(flat, idx), (k, m))


def energy_confusion(features, labels, I, J) -> Tensor:
    """Mean squared distance between all cross pairs of classes ``I`` and ``J``."""
    X = features if isinstance(features, Tensor) else Tensor(features)
    labels = np.asarray(labels)
    if I == J:
        raise ContractError("energy confusion needs two distinct classes")
    idx_i, idx_j = np.flatnonzero(labels == I), np.flatnonzero(labels == J)
    if idx_i.size == 0 or idx_j.size == 0:
        raise ContractError(f"class {I if idx_i.size == 0 else J} missing from batch")
    rows_i = np.repeat(idx_i, idx_j.size)
    rows_j = np.tile(idx_j, idx_i.size)
    diff = gc.take_rows(X, rows_i) - gc.take_rows(X, rows_j)
    return gc.mean(gc.sqnorm(diff, axis=-1))


def energy_confusion_all(features: Tensor, labels) -> Tensor:
    """Energy confusion averaged over every pair of distinct classes in the batch."""
    classes = np.unique(labels)
    terms = [energy_confusion(features, labels, a, b)
             for i, a in enumerate(classes) for b in classes[i + 1:]]
    if not terms:
        raise ContractError("energy confusion needs at least two classes")
    return gc.mean(gc.concat([gc.reshape(t, (1,)) for t in terms]))


# ---------------------------------------------------------------------------
# batched metric losses used in training


def metric_loss(kind: str, emb: Tensor, labels, tuples, cfg: MetricLossConfig,
                proxies: Tensor | None = None) -> Tensor:
    """Mean metric loss of ``tuples`` over the embedding matrix ``emb``."""
    if kind == "proxy_nca":
        if proxies is None:
            raise ContractError("proxy_nca needs proxies")
        return gc.mean(proxy_nca_loss(emb, np.asarray(labels), proxies))
    if len(tuples) == 0:
        raise ContractError("no tuples to evaluate")
    if kind == "triplet_hinge":
        a, p, n = (gc.take_rows(emb, ix) for ix in (tuples.anchor, tuples.positive, tuples.negative))
        return gc.mean(triplet_hinge(a, p, n, cfg.margin))
    if kind == "contrastive":
        if isinstance(tuples, NTupleSet):
            tuples = tuples.as_triplets()
        left = np.concatenate([tuples.anchor, tuples.anchor])
        right = np.concatenate([tuples.positive, tuples.negative])
        Y = np.concatenate([np.zeros(len(tuples)), np.ones(len(tuples))])
        return gc.mean(contrastive_loss(gc.take_rows(emb, left), gc.take_rows(emb, right), Y, cfg.Q))
    if kind in ("npair", "angular"):
        if not isinstance(tuples, NTupleSet):
            raise ContractError(f"{kind} loss needs N-tuples")
        k, m = tuples.negatives.shape
        a = gc.take_rows(emb, tuples.anchor)
        p = gc.take_rows(emb, tuples.positive)
        negs = gc.reshape(gc.take_rows(emb, tuples.negatives.reshape(-1)), (k, m, emb.shape[1]))
        if kind == "npair":
            return gc.mean(npair_loss(a, p, negs))
        return gc.mean(angular_loss(a, p, negs, cfg.angle_deg))
    raise ConfigError(f"unknown loss kind {kind!r}")


def minimize_metric(loss_fn, optimizer, groups=("extractor", "embedding")) -> float | None:
    """One optimizer step on the mean tuple loss.

    ``loss_fn`` builds the loss on the active tape and returns it (or
    ``None`` when no tuples were sampled, in which case nothing changes).
    """
    with gc.Tape():
        optimizer.zero_grad()
        loss = loss_fn()
        if loss is None:
            warnings.warn("empty tuple set: skipping step", RuntimeWarning, stacklevel=2)
            return None
        if loss.tracked:
            gc.backward(loss)
            optimizer.step(groups)
        return loss.item()
