"""Classification module and the two adversarial integration schemes.

``soft_adv`` adds a label-smoothed classification loss with a fixed weight.
``adapt_adv`` plays a minimax game: the feature extractor sees the classifier
through a gradient-reversal layer whose coefficient follows a tanh schedule
of the epoch-mean classification loss, while the classifier itself keeps
minimizing its loss in a separate step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .errors import ContractError, ParameterError
from .extractor import glorot_uniform
from .gradcore import Tensor

PROB_FLOOR = 1e-12
MODES = ("soft_adv", "adapt_adv")


class Classifier:
    """One hidden layer, dropout, softmax output."""

    def __init__(self, in_dim: int, n_classes: int, rng: np.random.Generator,
                 hidden_dim: int | None = None, activation: str = "relu", dropout: float = 0.1):
        if not 0.0 <= dropout < 1.0:
            raise ParameterError(f"dropout rate must lie in [0, 1), got {dropout}")
        hidden_dim = hidden_dim or max(1, in_dim // 2)
        self.in_dim = in_dim
        self.n_classes = n_classes
        self.activation = activation
        self.dropout = dropout
        self.params = {
            "hidden.W": Tensor(glorot_uniform(rng, in_dim, hidden_dim, (in_dim, hidden_dim)),
                               tracked=True),
            "hidden.b": Tensor(np.zeros(hidden_dim), tracked=True),
            "out.W": Tensor(glorot_uniform(rng, hidden_dim, n_classes, (hidden_dim, n_classes)),
                            tracked=True),
            "out.b": Tensor(np.zeros(n_classes), tracked=True),
        }

    def named_params(self) -> dict[str, Tensor]:
        return dict(self.params)

    def logits(self, f: Tensor, training: bool = False, rng=None) -> Tensor:
        if f.shape[-1] != self.in_dim:
            raise ContractError(f"classifier expects {self.in_dim} features, got {f.shape[-1]}")
        P = self.params
        h = f @ P["hidden.W"]
        h = gc.activation(self.activation)(h + gc.broadcast_to(P["hidden.b"], h.shape))
        h = gc.dropout(h, self.dropout, training, rng)
        z = h @ P["out.W"]
        return z + gc.broadcast_to(P["out.b"], z.shape)

    def __call__(self, f: Tensor, training: bool = False, rng=None) -> Tensor:
        return classify(f, self, training, rng)


def classify(f: Tensor, classifier: Classifier, training: bool = False, rng=None) -> Tensor:
    """Class probabilities (softmax of the classifier logits)."""
    return gc.softmax(classifier.logits(f, training, rng), axis=-1)


def _check_labels(y, n_classes: int) -> np.ndarray:
    ys = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(ys.dtype, np.integer) or ys.min() < 0 or ys.max() >= n_classes:
        raise ContractError(f"class label outside [0, {n_classes})")
    return ys


def cross_entropy(probs: Tensor, y) -> Tensor:
    """``-ln p_y`` with ``p_y`` floored at 1e-12; per row for a 2-D ``probs``."""
    if probs.ndim == 1:
        ys = _check_labels(y, probs.shape[0])
        p = gc.take_rows(probs, ys)
        return gc.reshape(gc.neg(gc.log(gc.clamp_min(p, PROB_FLOOR))), ())
    ys = _check_labels(y, probs.shape[1])
    if ys.shape != (probs.shape[0],):
        raise ContractError("one label per probability row is required")
    return gc.neg(gc.log(gc.clamp_min(gc.take_along(probs, ys), PROB_FLOOR)))


def smooth_labels(y, alpha: float, n_classes: int) -> np.ndarray:
    """``(1 - alpha) * onehot + alpha / C``; one row per label for array input."""
    if not 0.0 <= alpha < 1.0:
        raise ParameterError(f"smoothing factor must lie in [0, 1), got {alpha}")
    if n_classes < 2:
        raise ParameterError("label smoothing needs at least two classes")
    ys = _check_labels(y, n_classes)
    out = np.full((ys.size, n_classes), alpha / n_classes)
    out[np.arange(ys.size), ys] = (1.0 - alpha) + alpha / n_classes
    return out[0] if np.ndim(y) == 0 else out


def soft_ce(probs: Tensor, y_ls) -> Tensor:
    """``-sum_k y_ls[k] ln p_k`` (per row for 2-D input)."""
    y_ls = np.asarray(y_ls, dtype=np.float64)
    if y_ls.shape != probs.shape:
        raise ContractError(f"smoothed labels {y_ls.shape} do not match probabilities {probs.shape}")
    logp = gc.log(gc.clamp_min(probs, PROB_FLOOR))
    return gc.neg(gc.sum(gc.mul(Tensor(y_ls), logp), axis=-1))


def soft_adv_loss(l_m, l_c, lam: float):
    """Metric loss plus ``lam`` times the (smoothed) classification loss."""
    return l_m + lam * l_c


def adapt_adv_loss(l_m, l_c, lam: float):
    """Metric loss minus ``lam`` times the classification loss."""
    return l_m - lam * l_c


def lambda_schedule(l_c: float, l_thresh: float = 1.5, lambda0: float = 1.0) -> float:
    if not lambda0 > 0:
        raise ParameterError(f"lambda0 must be > 0, got {lambda0}")
    return -math.tanh(l_c - l_thresh) * lambda0


@dataclass
class AdversarialSchedule:
    lambda0: float = 0.5
    l_thresh: float = 1.5
    mode: str = "adapt_adv"
    current: float = 0.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}")
        if not 0.0 < self.lambda0 <= 1.0:
            raise ParameterError(f"lambda0 must lie in (0, 1], got {self.lambda0}")
        if self.mode == "soft_adv" and self.current == 0.0:
            self.current = self.lambda0

    def start(self, n_classes: int) -> float:
        """Initial lambda: the schedule evaluated at a uniform classifier's loss ``ln C``."""
        if self.mode == "adapt_adv":
            self.current = lambda_schedule(math.log(n_classes), self.l_thresh, self.lambda0)
        return self.current

    def update(self, mean_l_c: float) -> float:
        if self.mode == "adapt_adv":
            self.current = lambda_schedule(mean_l_c, self.l_thresh, self.lambda0)
        return self.current


@dataclass
class StepLosses:
    l_m: float
    l_c: float
    objective: float
    n_tuples: int = 0


def train_step_adversarial(model, optimizer, x, labels, sampler, schedule: AdversarialSchedule,
                           rng: np.random.Generator, training: bool = True) -> StepLosses:
    """Both phases of one adaptive-adversarial step.

    ``model`` exposes ``extractor``, ``embedding``, ``classifier`` and
    ``metric_loss(emb, labels, tuples)``; ``sampler(emb_array, labels, rng)``
    returns the tuples.  ``optimizer`` must hold groups ``extractor``,
    ``embedding`` and ``classifier`` (plus ``proxies`` when present).

    Phase 1 steps (extractor, embedding) on the metric loss while the
    classifier input passes through ``grad_reverse(f, lambda)``.  Phase 2
    recomputes features with the updated extractor and steps the classifier
    alone on ``lambda * l_c`` (plain ``l_c`` when lambda <= 0).
    """
    if schedule.mode != "adapt_adv":
        raise ContractError("train_step_adversarial needs an adapt_adv schedule")
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("empty batch")
    lam = schedule.current
    cls_labels = model.class_index(labels)
    metric_groups = [g for g in ("extractor", "embedding", "proxies") if g in optimizer.groups]

    with gc.Tape():
        optimizer.zero_grad()
        f = model.extractor(x)
        emb = model.embedding(f)
        tuples = sampler(emb.data, labels, rng)
        l_m = model.metric_loss(emb, labels, tuples)
        probs = classify(gc.grad_reverse(f, lam), model.classifier, training, rng)
        l_c = gc.mean(cross_entropy(probs, cls_labels))
        gc.backward(l_m + l_c)
        optimizer.step(metric_groups)
    l_m_val, l_c_val = l_m.item(), l_c.item()
    optimizer.zero_grad()

    with gc.Tape():
        with gc.no_grad():
            f2 = model.extractor(x)
        probs2 = classify(f2, model.classifier, training, rng)
        l_c2 = gc.mean(cross_entropy(probs2, cls_labels))
        phase2 = gc.mul(lam, l_c2) if lam > 0 else l_c2
        gc.backward(phase2)
        optimizer.step(["classifier"])
    optimizer.zero_grad()
    n_tuples = 0 if tuples is None else len(tuples)
    return StepLosses(l_m_val, l_c_val, adapt_adv_loss(l_m_val, l_c_val, lam), n_tuples)
