"""Zero-shot retrieval metrics: Recall@k, NMI over k-means clusters, 5-NN accuracy.

Neighbor rankings use Euclidean distance with the query excluded from its own
candidate list; equal distances are ordered by the lower index.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .errors import ContractError, ParameterError

DEFAULT_KS = (1, 2, 4, 8)
CSV_COLUMNS = ("split_id", "epoch", "nmi", "r@1", "r@2", "r@4", "r@8", "knn_acc")


def neighbor_ranking(embeddings) -> np.ndarray:
    """Row ``i`` lists all other indices ordered by distance to ``i`` (ties: lower index)."""
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    D = cdist(X, X)
    np.fill_diagonal(D, np.inf)
    order = np.argsort(D, axis=1, kind="stable")
    return order[:, : n - 1]


def recall_at_k(embeddings, labels, ks=DEFAULT_KS, ranking=None) -> dict[int, float]:
    """Fraction of queries with at least one same-label item among the k nearest.

    ``ranking`` may carry a precomputed :func:`neighbor_ranking`.
    """
    labels = np.asarray(labels)
    n = labels.size
    if n < 2:
        raise ParameterError("recall@k needs at least two points")
    for k in ks:
        if not 1 <= k < n:
            raise ParameterError(f"k={k} must satisfy 1 <= k < n={n}")
    if ranking is None:
        ranking = neighbor_ranking(embeddings)
    hits = labels[ranking] == labels[:, None]
    first_hit = np.where(hits.any(axis=1), hits.argmax(axis=1), n)
    return {int(k): float(np.mean(first_hit < k)) for k in ks}


def knn_acc(embeddings, labels, k: int = 5, ranking=None) -> float:
    """A query counts as correct when a strict majority of its k nearest share its label."""
    labels = np.asarray(labels)
    n = labels.size
    if n <= k:
        raise ParameterError(f"knn accuracy needs n > k, got n={n}, k={k}")
    if ranking is None:
        ranking = neighbor_ranking(embeddings)
    votes = (labels[ranking[:, :k]] == labels[:, None]).sum(axis=1)
    return float(np.mean(votes >= k // 2 + 1))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def nmi(assignments, labels) -> float:
    """``2 I(Y; C) / (H(Y) + H(C))`` from empirical counts, natural log.

    Two single-block partitions give 1; exactly one single-block partition
    gives 0.
    """
    c = np.asarray(assignments)
    y = np.asarray(labels)
    if c.shape != y.shape:
        raise ContractError(f"assignment and label lengths differ: {c.shape} vs {y.shape}")
    if c.size == 0:
        raise ContractError("nmi of an empty partition")
    _, ci = np.unique(c, return_inverse=True)
    _, yi = np.unique(y, return_inverse=True)
    joint = np.zeros((ci.max() + 1, yi.max() + 1))
    np.add.at(joint, (ci, yi), 1.0)
    h_c = _entropy(joint.sum(axis=1))
    h_y = _entropy(joint.sum(axis=0))
    if h_c == 0.0 and h_y == 0.0:
        return 1.0
    nonzero = joint > 0
    if (nonzero.sum(axis=0) == 1).all() and (nonzero.sum(axis=1) == 1).all():
        return 1.0  # same partition up to relabeling
    n = c.size
    pc = joint.sum(axis=1, keepdims=True) / n
    py = joint.sum(axis=0, keepdims=True) / n
    pj = joint / n
    nz = pj > 0
    mi = float(np.sum(pj[nz] * np.log(pj[nz] / (pc @ py)[nz])))
    return min(1.0, max(0.0, 2.0 * mi / (h_c + h_y)))


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centers: np.ndarray
    wcss: float
    history: list = field(default_factory=list)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


def _assign(X, centers):
    d2 = cdist(X, centers, "sqeuclidean")
    a = np.argmin(d2, axis=1)
    return a, float(d2[np.arange(X.shape[0]), a].sum())


def _lloyd(X, centers, max_iter, tol):
    assign, wcss = _assign(X, centers)
    history = [wcss]
    for _ in range(max_iter):
        new = centers.copy()
        for j in range(centers.shape[0]):
            members = X[assign == j]
            if len(members):
                new[j] = members.mean(axis=0)
        new_assign, new_wcss = _assign(X, new)
        if new_wcss > wcss:
            break
        centers, assign = new, new_assign
        history.append(new_wcss)
        done = wcss - new_wcss <= tol * max(wcss, 1e-300)
        wcss = new_wcss
        if done:
            break
    return KMeansResult(assign, centers, wcss, history)


def kmeans(embeddings, k: int, rng: np.random.Generator, restarts: int = 8,
           max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best of ``restarts`` by WCSS."""
    X = np.asarray(embeddings, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ParameterError(f"k={k} must satisfy 1 <= k <= n={n}")
    best = None
    for _ in range(restarts):
        res = _lloyd(X, _kmeans_pp(X, k, rng), max_iter, tol)
        if best is None or res.wcss < best.wcss:
            best = res
    return best


@dataclass
class EvalReport:
    recall_at: dict
    nmi: float
    knn_acc: float
    n_queries: int
    split_id: str = "test"
    epoch: int | None = None

    def __post_init__(self):
        ks = sorted(self.recall_at)
        vals = [self.recall_at[k] for k in ks]
        if any(b < a for a, b in zip(vals, vals[1:])):
            raise ContractError("recall@k must be nondecreasing in k")
        for v in vals + [self.nmi, self.knn_acc]:
            if not 0.0 <= v <= 1.0:
                raise ContractError(f"metric value {v} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["recall_at"] = {str(k): v for k, v in sorted(self.recall_at.items())}
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text + "\n")
        return text

    def csv_row(self) -> list:
        cells = [self.split_id, "" if self.epoch is None else self.epoch, repr(self.nmi)]
        for k in (1, 2, 4, 8):
            v = self.recall_at.get(k)
            cells.append("" if v is None else repr(v))
        cells.append(repr(self.knn_acc))
        return cells

    def append_csv(self, path) -> None:
        new = not os.path.exists(path) or os.path.getsize(path) == 0
        with open(path, "a", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(CSV_COLUMNS)
            w.writerow(self.csv_row())


def evaluate_embeddings(embeddings, labels, ks=DEFAULT_KS, rng=None, split_id: str = "test",
                        epoch: int | None = None, knn_k: int = 5) -> EvalReport:
    """Recall@ks, NMI of k-means with k = number of classes, and kNN accuracy."""
    labels = np.asarray(labels)
    rng = rng if rng is not None else np.random.default_rng(0)
    n_classes = np.unique(labels).size
    clusters = kmeans(embeddings, n_classes, rng).assignments
    ranking = neighbor_ranking(embeddings)
    return EvalReport(
        recall_at=recall_at_k(embeddings, labels, ks, ranking),
        nmi=nmi(clusters, labels),
        knn_acc=knn_acc(embeddings, labels, knn_k, ranking),
        n_queries=int(labels.size),
        split_id=split_id,
        epoch=epoch,
    )


def chance_recall_at_1(labels) -> float:
    """Expected Recall@1 of a random ranking: mean over queries of (n_y - 1) / (n - 1)."""
    labels = np.asarray(labels)
    n = labels.size
    _, counts = np.unique(labels, return_counts=True)
    return float(np.sum(counts * (counts - 1)) / (n * (n - 1)))


__all__ = ["recall_at_k", "knn_acc", "nmi", "kmeans", "KMeansResult", "EvalReport",
           "evaluate_embeddings", "neighbor_ranking", "chance_recall_at_1", "DEFAULT_KS",
           "CSV_COLUMNS"]
