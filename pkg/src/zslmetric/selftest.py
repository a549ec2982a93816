"""Fast built-in checks: gradient checks on every differentiable piece and metric oracles.

Run with ``zslmetric selftest`` or ``python -m zslmetric.selftest``.
"""

from __future__ import annotations

import math
import time

import numpy as np

from . import gradcore as gc
from .adversary import Classifier, classify, cross_entropy, smooth_labels, soft_ce
from .extractor import ATTENTION_KINDS, BackboneConfig, ExtractorConfig, FeatureExtractor
from .gradcore import Tensor
from .losses import (angular_loss, contrastive_loss, energy_confusion, npair_loss,
                     proxy_nca_loss, triplet_hinge)
from .metrics import knn_acc, nmi, recall_at_k

TOL = 1e-4


def _primitive_cases(rng):
    pos = lambda shape: rng.uniform(0.5, 2.0, shape)  # noqa: E731
    W = Tensor(rng.standard_normal((4, 3)))
    return {
        "matmul": (lambda x: gc.sum(gc.tanh(x @ W)), rng.standard_normal((2, 4))),
        "add_sub_mul": (lambda x: gc.sum((x + x * x) - 0.3 * x), rng.standard_normal(5)),
        "div": (lambda x: gc.sum(gc.div(1.0, x)), pos(4)),
        "relu": (lambda x: gc.sum(gc.relu(x) * x), rng.standard_normal(6)),
        "tanh": (lambda x: gc.sum(gc.tanh(x)), rng.standard_normal(6)),
        "sigmoid": (lambda x: gc.sum(gc.sigmoid(x)), rng.standard_normal(6)),
        "exp_log": (lambda x: gc.sum(gc.log(gc.exp(x) + 1.0)), rng.standard_normal(6)),
        "mean": (lambda x: gc.mean(x * x, axis=0).sum(), rng.standard_normal((3, 2))),
        "sqnorm": (lambda x: gc.sqnorm(x, axis=None), rng.standard_normal(5)),
        "l2_normalize": (lambda x: gc.sum(gc.l2_normalize(x) * Tensor([1., 2., 3.])),
                         rng.standard_normal(3)),
        "concat_reshape": (lambda x: gc.sum(gc.tanh(gc.reshape(gc.concat([x, x * 2.0]), (4, 3)))),
                           rng.standard_normal((2, 3))),
        "take_rows": (lambda x: gc.sum(gc.tanh(gc.take_rows(x, [0, 2, 2]))),
                      rng.standard_normal((3, 2))),
        "softmax": (lambda x: gc.sum(gc.softmax(x) * Tensor([1., -2., 0.5, 3.])),
                    rng.standard_normal(4)),
        "logsumexp": (lambda x: gc.logsumexp(x), rng.standard_normal(4)),
    }


def _model_cases(rng, seed):
    cases = {}
    for kind in ATTENTION_KINDS:
        cfg = ExtractorConfig(BackboneConfig(6, [(3, 2, 1), (2, 1, 2)], 4, "tanh"), kind)
        ext = FeatureExtractor(cfg, np.random.default_rng(seed))
        head = Tensor(rng.standard_normal(cfg.feature_dim))
        cases[f"extractor[{kind}]"] = (lambda t, ext=ext, head=head: gc.sum(gc.tanh(ext(t) @ head)),
                                       rng.standard_normal((2, 6)))
    a, p, n = (rng.standard_normal(4) for _ in range(3))
    negs = rng.standard_normal((3, 4))
    cases.update({
        "contrastive": (lambda t: contrastive_loss(t, Tensor(p), 1, 2.0), a),
        "triplet_hinge": (lambda t: triplet_hinge(t, Tensor(p), Tensor(n), 5.0), a),
        "npair": (lambda t: npair_loss(t, Tensor(p), Tensor(negs)), a),
        "angular": (lambda t: angular_loss(Tensor(a), t, Tensor(negs)), p),
        "proxy_nca": (lambda t: proxy_nca_loss(Tensor(a), 1, t), negs),
        "energy_confusion": (lambda t: energy_confusion(t, [0, 0, 1], 0, 1),
                             rng.standard_normal((3, 2))),
    })
    clf = Classifier(12, 3, np.random.default_rng(seed), dropout=0.0)
    y_ls = smooth_labels([0, 2], 0.15, 3)
    cases["classifier_ce"] = (lambda t: gc.mean(cross_entropy(classify(t, clf), [0, 2])),
                              rng.standard_normal((2, 12)))
    cases["classifier_soft_ce"] = (lambda t: gc.mean(soft_ce(classify(t, clf), y_ls)),
                                   rng.standard_normal((2, 12)))
    return cases


def _has_gradient(f, x0) -> bool:
    x = Tensor(x0, tracked=True)
    with gc.Tape():
        gc.backward(f(x), inputs=[x])
    return bool(np.any(x.grad != 0))


def check_gradients(seed: int = 0, points: int = 3) -> list[tuple[str, float]]:
    """Worst relative error per case over ``points`` random inputs (the first is the base point)."""
    rng = np.random.default_rng(seed)
    cases = {**_primitive_cases(rng), **_model_cases(rng, seed)}
    results = []
    for name, (f, x0) in cases.items():
        points_x = [x0 + 0.1 * rng.standard_normal(np.shape(x0)) * (i > 0) for i in range(points)]
        err = max(gc.grad_check(f, x) for x in points_x)
        if not any(_has_gradient(f, x) for x in points_x):
            err = math.inf  # a vanishing gradient makes the check vacuous
        results.append((name, err))
    x0 = rng.standard_normal(4)
    results.append(("grad_reverse_composite",
                    max(grl_composite_error(x0 + 0.1 * rng.standard_normal(4) * (i > 0), 0.7)
                        for i in range(points))))
    return results


def grl_composite_error(x0, lam: float, eps: float = 1e-6) -> float:
    """Backprop through ``tanh(grad_reverse(x))`` against ``-lam`` times central differences."""
    x = Tensor(x0, tracked=True)
    with gc.Tape():
        gc.backward(gc.sum(gc.tanh(gc.grad_reverse(x, lam))), inputs=[x])
    numeric = np.empty_like(x0)
    for i in range(x0.size):
        e = np.zeros_like(x0)
        e[i] = eps
        numeric[i] = (np.sum(np.tanh(x0 + e)) - np.sum(np.tanh(x0 - e))) / (2 * eps)
    expected = -lam * numeric
    return float(np.max(np.abs(x.grad - expected) / np.maximum(1.0, np.abs(x.grad))))


def _brute_recall(X, y, k):
    n = len(y)
    hits = 0
    for i in range(n):
        order = sorted((j for j in range(n) if j != i),
                       key=lambda j: (math.dist(X[i], X[j]), j))
        hits += any(y[j] == y[i] for j in order[:k])
    return hits / n


def _brute_nmi(c, y):
    n = len(y)
    pc = {a: c.count(a) / n for a in set(c)}
    py = {b: y.count(b) / n for b in set(y)}
    joint = {}
    for a, b in zip(c, y):
        joint[(a, b)] = joint.get((a, b), 0) + 1 / n
    mi = sum(p * math.log(p / (pc[a] * py[b])) for (a, b), p in joint.items())
    hc = -sum(p * math.log(p) for p in pc.values())
    hy = -sum(p * math.log(p) for p in py.values())
    if hc + hy == 0:
        return 1.0
    return 2 * mi / (hc + hy)


def check_metrics(seed: int = 0, draws: int = 20) -> list[tuple[str, bool]]:
    rng = np.random.default_rng(seed)
    ok_recall = ok_nmi = ok_knn = True
    for _ in range(draws):
        n = int(rng.integers(6, 13))
        X = rng.standard_normal((n, 2))
        y = list(rng.integers(0, 3, n))
        got = recall_at_k(X, y, [1, 2, 4])
        ok_recall &= all(got[k] == _brute_recall(X, y, k) for k in (1, 2, 4))
        c = list(rng.integers(0, 3, n))
        ok_nmi &= abs(nmi(c, y) - _brute_nmi(c, y)) < 1e-12
        votes_ok = []
        for i in range(n):
            order = sorted((j for j in range(n) if j != i), key=lambda j: (math.dist(X[i], X[j]), j))
            votes_ok.append(sum(y[j] == y[i] for j in order[:5]) >= 3)
        ok_knn &= knn_acc(X, y, 5) == sum(votes_ok) / n
    return [("recall_at_k", ok_recall), ("nmi", ok_nmi), ("knn_acc", ok_knn)]


def run(verbose: bool = True) -> bool:
    start = time.perf_counter()
    passed = True
    for name, err in check_gradients():
        ok = err < TOL
        passed &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} grad {name:<34} max rel err {err:.2e}")
    for name, ok in check_metrics():
        passed &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} oracle {name}")
    x = Tensor(np.arange(4.0), tracked=True)
    for lam in (-1.0, 0.0, 0.5, 1.0):
        with gc.Tape():
            y = gc.grad_reverse(x, lam)
            same = np.array_equal(y.data, x.data)
            gc.backward(gc.sum(y * Tensor([1.0, -2.0, 3.0, 0.5])), inputs=[x])
        ok = same and np.array_equal(x.grad, -lam * np.array([1.0, -2.0, 3.0, 0.5]))
        x.zero_grad()
        passed &= ok
        if verbose:
            print(f"{'PASS' if ok else 'FAIL'} grad_reverse lambda={lam}")
    if verbose:
        print(f"selftest {'passed' if passed else 'FAILED'} in {time.perf_counter() - start:.1f}s")
    return passed


if __name__ == "__main__":
    raise SystemExit(0 if run() else 1)
