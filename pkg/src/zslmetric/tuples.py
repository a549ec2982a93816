"""Training-constraint samplers: easy, hard and semi-hard triplets, N-pair tuples.

Samplers work on plain arrays (an ``n x d`` feature matrix and ``n`` labels);
they pick indices and never participate in the gradient tape.  Distances use
the raw rows unless ``normalize=True`` is passed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractError, ParameterError
from .gradcore import Tensor


class Triplet(NamedTuple):
    anchor: int
    positive: int
    negative: int


class NTuple(NamedTuple):
    anchor: int
    positive: int
    negatives: tuple


class SamplingWarning(UserWarning):
    """A sampler could not produce any constraint for the batch."""


@dataclass
class FeatureBatch:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if isinstance(self.features, Tensor):
            self.features = self.features.data
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.features.ndim != 2 or self.features.shape[0] < 2:
            raise ContractError(f"feature batch must be n x d with n >= 2, "
                                f"got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ContractError("one label per feature row is required")
        if not np.isfinite(self.features).all():
            raise ContractError("feature batch contains non-finite rows")

    def __len__(self):
        return self.features.shape[0]


@dataclass
class TripletSet:
    """Triplets as parallel index arrays; ``fallback`` marks easy replacements."""

    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    fallback: np.ndarray

    @classmethod
    def from_rows(cls, rows, fallback=None) -> "TripletSet":
        arr = np.asarray(rows, dtype=np.intp).reshape(-1, 3)
        fb = np.zeros(len(arr), dtype=bool) if fallback is None else np.asarray(fallback, bool)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], fb)

    def __len__(self):
        return len(self.anchor)

    def __iter__(self) -> Iterator[Triplet]:
        for a, p, n in zip(self.anchor, self.positive, self.negative):
            yield Triplet(int(a), int(p), int(n))


@dataclass
class NTupleSet:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: np.ndarray  # (k, N-1)

    def __len__(self):
        return len(self.anchor)

    def __iter__(self) -> Iterator[NTuple]:
        for a, p, ns in zip(self.anchor, self.positive, self.negatives):
            yield NTuple(int(a), int(p), tuple(int(v) for v in ns))

    def as_triplets(self) -> TripletSet:
        if self.negatives.shape[1] != 1:
            raise ContractError("only 2-class N-tuples reduce to triplets")
        return TripletSet(self.anchor, self.positive, self.negatives[:, 0],
                          np.zeros(len(self), dtype=bool))


def _as_batch(batch) -> FeatureBatch:
    return batch if isinstance(batch, FeatureBatch) else FeatureBatch(*batch)


def pairwise_distances(batch, normalize: bool = False) -> np.ndarray:
    """Euclidean distance matrix of the batch rows (symmetric, zero diagonal)."""
    X = _as_batch(batch).features
    if normalize:
        X = X / np.linalg.norm(X, axis=1, keepdims=True)
    D = cdist(X, X)
    np.fill_diagonal(D, 0.0)
    return D


def _positive_pairs(labels: np.ndarray):
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return np.argwhere(same)


def sample_easy(batch, per_anchor: int, rng: np.random.Generator) -> TripletSet:
    """Random positive from the anchor's class, random negative from any other class."""
    batch = _as_batch(batch)
    y = batch.labels
    if np.unique(y).size < 2:
        warnings.warn("single-class batch: no negatives available", SamplingWarning, stacklevel=2)
        return TripletSet.from_rows([])
    rows = []
    for a in range(len(y)):
        pos = np.flatnonzero((y == y[a]) & (np.arange(len(y)) != a))
        if pos.size == 0:
            continue
        neg = np.flatnonzero(y != y[a])
        for _ in range(per_anchor):
            rows.append((a, pos[rng.integers(pos.size)], neg[rng.integers(neg.size)]))
    return TripletSet.from_rows(rows)


def sample_hard(batch, rng: np.random.Generator, normalize: bool = False) -> TripletSet:
    """For every (anchor, positive) pair draw a negative with d(a, n) < d(a, p)."""
    batch = _as_batch(batch)
    y = batch.labels
    D = pairwise_distances(batch, normalize)
    rows = []
    for a, p in _positive_pairs(y):
        cand = np.flatnonzero((y != y[a]) & (D[a] < D[a, p]))
        if cand.size:
            rows.append((a, p, cand[rng.integers(cand.size)]))
    return TripletSet.from_rows(rows)


def semihard_mask(D: np.ndarray, labels: np.ndarray, a: int, p: int, margin: float) -> np.ndarray:
    d_pos = D[a, p]
    return (labels != labels[a]) & (D[a] > d_pos) & (D[a] - d_pos < margin)


def sample_semihard(batch, margin: float, rng: np.random.Generator,
                    normalize: bool = False) -> TripletSet:
    """Semi-hard negatives ``d+ < d- < d+ + margin`` per (anchor, positive) pair.

    Pairs without a semi-hard candidate get a uniformly random negative
    instead, marked in ``fallback``.
    """
    if not margin > 0:
        raise ParameterError(f"margin must be > 0, got {margin}")
    batch = _as_batch(batch)
    y = batch.labels
    D = pairwise_distances(batch, normalize)
    rows, fallback = [], []
    for a, p in _positive_pairs(y):
        cand = np.flatnonzero(semihard_mask(D, y, a, p, margin))
        if cand.size:
            rows.append((a, p, cand[rng.integers(cand.size)]))
            fallback.append(False)
            continue
        neg = np.flatnonzero(y != y[a])
        if neg.size:
            rows.append((a, p, neg[rng.integers(neg.size)]))
            fallback.append(True)
    return TripletSet.from_rows(rows, fallback)


def sample_npair(batch, rng: np.random.Generator) -> NTupleSet:
    """One tuple per anchor: a positive plus one negative from each other class."""
    batch = _as_batch(batch)
    y = batch.labels
    classes = np.unique(y)
    if classes.size < 2:
        warnings.warn("single-class batch: no negatives available", SamplingWarning, stacklevel=2)
        return NTupleSet(np.empty(0, np.intp), np.empty(0, np.intp), np.empty((0, 0), np.intp))
    members = {c: np.flatnonzero(y == c) for c in classes}
    anchors, positives, negatives = [], [], []
    for a in range(len(y)):
        pos = members[y[a]][members[y[a]] != a]
        if pos.size == 0:
            continue
        anchors.append(a)
        positives.append(pos[rng.integers(pos.size)])
        negatives.append([members[c][rng.integers(members[c].size)]
                          for c in classes if c != y[a]])
    return NTupleSet(np.asarray(anchors, np.intp), np.asarray(positives, np.intp),
                     np.asarray(negatives, np.intp).reshape(len(anchors), classes.size - 1))
