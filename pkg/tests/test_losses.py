import math

import numpy as np
import pytest

from zslmetric import gradcore as gc
from zslmetric.errors import ConfigError, ContractError, ParameterError
from zslmetric.extractor import BackboneConfig, ExtractorConfig, FeatureExtractor
from zslmetric.gradcore import Tape, Tensor
from zslmetric.losses import (EmbeddingLayer, MetricLossConfig, angular_coefficients,
                              angular_exponents, angular_loss, contrastive_loss, energy_confusion,
                              energy_confusion_all, metric_loss, minimize_metric, npair_loss,
                              proxy_nca_loss, triplet_hinge)
from zslmetric.optim import Adam
from zslmetric.tuples import FeatureBatch, TripletSet, sample_semihard


def T(x):
    return Tensor(np.asarray(x, dtype=float))


def test_config_fields_per_kind():
    assert MetricLossConfig("triplet_hinge").margin == 0.01
    assert MetricLossConfig("contrastive").Q == 2.0
    assert MetricLossConfig("angular").angle_deg == 45.0
    with pytest.raises(ConfigError):
        MetricLossConfig("npair", margin=0.1)
    with pytest.raises(ConfigError):
        MetricLossConfig("hinge_of_doom")


def test_contrastive_examples(rng):
    e = rng.standard_normal(4)
    assert contrastive_loss(T(e), T(e), 0, 2.0).item() == 0.0
    assert contrastive_loss(T(e), T(e), 1, 2.0).item() == 4.0
    e2 = rng.standard_normal(4)
    E = np.linalg.norm(e - e2)
    assert math.isclose(contrastive_loss(T(e), T(e2), 1, 3.0).item(), 6 * math.exp(-2.77 * E / 3),
                        rel_tol=1e-13)
    assert gc.grad_check(lambda t: contrastive_loss(t, T(e2), 0, 2.0), e) < 1e-4
    with pytest.raises(ParameterError):
        contrastive_loss(T(e), T(e2), 0, 0.0)


def _at_distances(d_pos, d_neg):
    a = T([0.0])
    return a, T([d_pos]), T([d_neg])


def test_triplet_examples():
    assert triplet_hinge(*_at_distances(0.5, 0.6), margin=0.01).item() == 0.0
    assert math.isclose(triplet_hinge(*_at_distances(0.5, 0.505), margin=0.01).item(), 0.005,
                        abs_tol=1e-15)
    with pytest.raises(ParameterError):
        triplet_hinge(*_at_distances(0.5, 0.6), margin=0.0)


def test_triplet_monotone_in_d_minus():
    vals = [triplet_hinge(*_at_distances(0.5, d), margin=0.01).item()
            for d in np.linspace(0.3, 0.7, 401)]
    assert all(b <= a for a, b in zip(vals, vals[1:]))


def test_triplet_zero_iff_gap_at_least_margin(rng):
    for _ in range(500):
        a, p, n = rng.standard_normal((3, 2))
        margin = float(rng.uniform(0.01, 1))
        gap = np.linalg.norm(a - n) - np.linalg.norm(a - p)
        zero = triplet_hinge(T(a), T(p), T(n), margin).item() == 0.0
        assert zero == (gap >= margin)


def test_npair_examples(rng):
    a = T([1.0, 0.0])
    assert math.isclose(npair_loss(a, a, T([[1.0, 0.0]])).item(), math.log(2), rel_tol=1e-15)
    assert npair_loss(T([30.0, 0.0]), T([30.0, 0.0]), T([[0.0, 1.0]])).item() < 1e-300 + 1e-200
    anc, pos, negs = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal((4, 3))
    sp = sum(x * y for x, y in zip(anc, pos))
    oracle = math.log(1 + sum(math.exp(sum(x * y for x, y in zip(anc, n)) - sp) for n in negs))
    assert abs(npair_loss(T(anc), T(pos), T(negs)).item() - oracle) < 1e-12
    perm = rng.permutation(4)
    assert abs(npair_loss(T(anc), T(pos), T(negs[perm])).item() - oracle) < 1e-12


def test_angular_examples(rng):
    c_neg, _ = angular_coefficients(45.0)
    assert math.isclose(c_neg, 4.0, rel_tol=1e-15)
    with pytest.raises(ParameterError):
        angular_coefficients(90.0)
    anc, pos, negs = rng.standard_normal(3), rng.standard_normal(3), rng.standard_normal((3, 3))
    t2 = math.tan(math.radians(30)) ** 2
    oracle = [4 * t2 * sum((anc[i] + pos[i]) * n[i] for i in range(3))
              - 2 * (1 + t2) * sum(anc[i] * pos[i] for i in range(3)) for n in negs]
    got = angular_exponents(T(anc), T(pos), T(negs), 30.0).data
    assert np.max(np.abs(got - oracle)) < 1e-12
    assert gc.grad_check(lambda t: angular_loss(t, T(pos), T(negs)), anc) < 1e-4
    perm = rng.permutation(3)
    assert math.isclose(angular_loss(T(anc), T(pos), T(negs)).item(),
                        angular_loss(T(anc), T(pos), T(negs[perm])).item(), rel_tol=1e-13)


def test_proxy_nca_examples(rng):
    f = T([1.0, 0.0])
    assert abs(proxy_nca_loss(f, 0, T([[0.0, 1.0], [0.0, -1.0]])).item()) < 1e-15
    # f on p_y with the others far: the normalized value is -d_y^2 + ln sum exp(-d_z^2)
    proxies = T([[1.0, 0.0], [-1.0, 0.0], [-1.0, 0.001]])
    got = proxy_nca_loss(f, 0, proxies).item()
    assert math.isclose(got, math.log(2 * math.exp(-4.0)), rel_tol=1e-5)
    with pytest.raises(ContractError):
        proxy_nca_loss(f, 3, proxies)


def test_proxy_nca_gradients_reach_both(rng):
    f = Tensor(rng.standard_normal(4), tracked=True)
    P = Tensor(rng.standard_normal((3, 4)), tracked=True)
    with Tape():
        gc.backward(proxy_nca_loss(f, 1, P))
    assert np.abs(f.grad).max() > 0 and np.abs(P.grad).max() > 0


def test_energy_confusion_examples(rng):
    x = rng.standard_normal(3)
    assert energy_confusion(np.vstack([x, x]), [0, 1], 0, 1).item() == 0.0
    assert energy_confusion(np.array([[0.0], [2.0]]), [0, 2], 0, 2).item() == 4.0
    y = rng.integers(0, 3, 9)
    y[:3] = [0, 1, 2]
    X = rng.standard_normal((9, 2))
    I, J = [i for i in range(9) if y[i] == 0], [j for j in range(9) if y[j] == 2]
    oracle = sum(sum((X[i][k] - X[j][k]) ** 2 for k in range(2)) for i in I for j in J) / (len(I) * len(J))
    assert abs(energy_confusion(X, y, 0, 2).item() - oracle) < 1e-10
    with pytest.raises(ContractError):
        energy_confusion(X, y, 0, 7)
    assert energy_confusion_all(Tensor(X), y).item() > 0


def test_losses_nonnegative(rng):
    for _ in range(200):
        a, p, n = rng.standard_normal((3, 4))
        negs = rng.standard_normal((3, 4))
        assert triplet_hinge(T(a), T(p), T(n), 0.5).item() >= 0
        assert contrastive_loss(T(a), T(p), int(rng.integers(2)), 2.0).item() >= 0
        assert npair_loss(T(a), T(p), T(negs)).item() >= 0
        assert angular_loss(T(a), T(p), T(negs)).item() >= 0


def test_embedding_layer_unit_norm(rng):
    emb = EmbeddingLayer(5, 64, rng)
    out = emb(T(rng.standard_normal((3, 5)))).data
    assert out.shape == (3, 64) and np.allclose(np.linalg.norm(out, axis=1), 1.0)


@pytest.mark.parametrize("kind", ["triplet_hinge", "contrastive", "npair", "angular", "proxy_nca"])
def test_losses_composed_with_extractor_grad_check(kind, rng):
    ext = FeatureExtractor(ExtractorConfig(BackboneConfig(5, [(3, 2, 1)], 4, "tanh")),
                           np.random.default_rng(1))
    emb = EmbeddingLayer(3, 4, np.random.default_rng(2))
    y = np.array([0, 0, 1, 1, 2, 2])
    cfg = MetricLossConfig(kind, **({"margin": 5.0} if kind == "triplet_hinge" else {}))
    proxies = Tensor(rng.standard_normal((3, 4))) if kind == "proxy_nca" else None
    from zslmetric.tuples import sample_easy, sample_npair
    base = rng.standard_normal((6, 5))
    batch = FeatureBatch(base, y)
    tuples = None
    if kind in ("npair", "angular"):
        tuples = sample_npair(batch, np.random.default_rng(0))
    elif kind != "proxy_nca":
        tuples = sample_easy(batch, 1, np.random.default_rng(0))

    def f(x):
        return metric_loss(kind, emb(ext(x)), y, tuples, cfg, proxies)

    assert gc.grad_check(f, base) < 1e-4


def test_mean_is_sum_over_n(rng):
    E = rng.standard_normal((6, 3))
    ts = TripletSet.from_rows([(0, 1, 2), (3, 4, 5), (1, 0, 4)])
    cfg = MetricLossConfig("triplet_hinge", margin=0.5)
    mean = metric_loss("triplet_hinge", T(E), None, ts, cfg).item()
    per = [triplet_hinge(T(E[a]), T(E[p]), T(E[n]), 0.5).item() for a, p, n in ts]
    assert math.isclose(mean, sum(per) / 3, rel_tol=1e-14)


def test_minimize_metric_zero_loss_and_empty(rng):
    W = Tensor(rng.standard_normal((2, 2)), tracked=True)
    opt = Adam({"embedding": ([W], 0.1)})
    before = W.data.copy()
    W.data = np.eye(2)
    before = W.data.copy()
    far = T([[0.0, 0.0], [0.0, 0.0], [10.0, 10.0]])
    ts = TripletSet.from_rows([(0, 1, 2)])
    val = minimize_metric(lambda: metric_loss("triplet_hinge", far @ W, None, ts,
                                              MetricLossConfig("triplet_hinge")), opt, ["embedding"])
    assert val == 0.0 and np.array_equal(W.data, before)
    with pytest.warns(RuntimeWarning):
        assert minimize_metric(lambda: None, opt, ["embedding"]) is None


def test_minimize_metric_converges():
    r = np.random.default_rng(0)
    centers = r.standard_normal((3, 4))
    y = np.repeat(np.arange(3), 6)
    X = centers[y] + 0.2 * r.standard_normal((18, 4))
    W = Tensor(np.eye(4) * 0.1 + 0.01 * r.standard_normal((4, 4)), tracked=True)
    opt = Adam({"embedding": ([W], 0.02)})
    cfg = MetricLossConfig("triplet_hinge", margin=1.0)
    ts = sample_semihard(FeatureBatch(X, y), 1.0, r)
    losses = [minimize_metric(lambda: metric_loss("triplet_hinge", T(X) @ W, y, ts, cfg), opt,
                              ["embedding"]) for _ in range(200)]
    assert losses[-1] < 0.1 * losses[0]
