import csv

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist
from scipy.stats import multivariate_normal
from sklearn.metrics import silhouette_score as sk_silhouette
from sklearn.utils.estimator_checks import check_get_params_invariance

from trajode.errors import (ConfigurationError, EmptyClusterError, FactorizationError,
                            UndefinedMetricError)
from trajode.mixture import (GaussianMixture, GaussianMixtureEM, default_ridge, e_step, em_fit,
                             jensen_shannon_score, log_density, m_step, select_k,
                             silhouette_score, synthetic_regimes)


def _random_gmm(r, K, d):
    A = r.normal(size=(K, d, d))
    covs = A @ A.transpose(0, 2, 1) + 0.5 * np.eye(d)
    w = r.dirichlet(np.ones(K))
    return GaussianMixture(w / w.sum(), r.normal(size=(K, d)), covs)


def test_log_density_standard_normal():
    g = GaussianMixture([1.0], np.zeros((1, 2)), np.eye(2)[None])
    assert log_density(np.zeros(2), g) == pytest.approx(-1.8378770664093453, abs=1e-12)
    assert log_density(np.zeros(2), g) == pytest.approx(np.log(1 / (2 * np.pi)), abs=1e-14)


def test_log_density_matches_naive_sum():
    r = np.random.default_rng(0)
    for _ in range(50):
        K, d = r.integers(1, 4), r.integers(1, 4)
        g = _random_gmm(r, K, d)
        z = r.normal(size=d)
        naive = sum(g.weights[k] * multivariate_normal(g.means[k], g.covariances[k]).pdf(z)
                    for k in range(K))
        lp = log_density(z, g)
        assert lp == pytest.approx(np.log(naive), rel=1e-10)
        for k in range(K):
            comp = np.log(g.weights[k]) + multivariate_normal(g.means[k], g.covariances[k]).logpdf(z)
            assert lp >= comp - 1e-12


def test_non_pd_covariance():
    g = GaussianMixture([1.0], np.zeros((1, 2)), np.array([[[1.0, 2.0], [2.0, 1.0]]]))
    with pytest.raises(FactorizationError):
        log_density(np.zeros(2), g)


def test_e_step_properties():
    r = np.random.default_rng(1)
    X = r.normal(size=(30, 2))
    single = GaussianMixture([1.0], np.zeros((1, 2)), np.eye(2)[None])
    assert np.array_equal(e_step(X, single), np.ones((30, 1)))
    g = GaussianMixture([0.5, 0.5], np.array([[0.0, 0.0], [20.0, 0.0]]), np.stack([np.eye(2)] * 2))
    assert e_step(np.array([[20.0, 0.0]]), g)[0, 1] > 0.999
    resp = e_step(X, _random_gmm(r, 3, 2))
    assert np.all(np.abs(resp.sum(axis=1) - 1) < 1e-12)
    assert np.all((resp >= 0) & (resp <= 1))


def test_m_step_closed_forms():
    r = np.random.default_rng(2)
    X = r.normal(size=(40, 3))
    g = m_step(X, np.ones((40, 1)))
    eps = default_ridge(X)
    assert np.allclose(g.means[0], X.mean(axis=0), atol=1e-14)
    assert np.allclose(g.covariances[0], np.cov(X, rowvar=False, bias=True) + eps * np.eye(3),
                       atol=1e-13)
    labels = r.integers(0, 3, size=40)
    g = m_step(X, np.eye(3)[labels], ridge=0.0)
    for k in range(3):
        part = X[labels == k]
        assert np.allclose(g.means[k], part.mean(axis=0), atol=1e-14)
        assert np.allclose(g.covariances[k], np.cov(part, rowvar=False, bias=True), atol=1e-13)
        assert g.weights[k] == pytest.approx(len(part) / 40)
    assert abs(g.weights.sum() - 1) < 1e-12


def test_m_step_empty_cluster_names_component():
    resp = np.zeros((10, 2))
    resp[:, 0] = 1.0
    with pytest.raises(EmptyClusterError, match="1"):
        m_step(np.random.default_rng(0).normal(size=(10, 2)), resp)


def _three_cluster_data(seed, sigma=0.1, sep_sigmas=10.0, n=600, d=4):
    r = np.random.default_rng(seed)
    means = np.zeros((3, d))
    means[1, 0] = sep_sigmas * sigma
    means[2, 1] = sep_sigmas * sigma
    labels = np.repeat(np.arange(3), n // 3)
    return means[labels] + sigma * r.standard_normal((n, d)), means


def test_em_recovers_means_and_trace_is_monotone():
    for seed in range(5):
        X, means = _three_cluster_data(seed)
        g, trace = em_fit(X, 3, seed)
        cost = np.linalg.norm(g.means[:, None] - means[None], axis=2)
        rows, cols = linear_sum_assignment(cost)
        assert cost[rows, cols].max() < 0.1
        assert np.all(np.diff(trace) >= -1e-9)


def test_em_single_component_is_mle():
    X = np.random.default_rng(3).normal(size=(50, 2))
    g, trace = em_fit(X, 1, 0)
    assert np.allclose(g.means[0], X.mean(axis=0), atol=1e-14)
    assert len(trace) <= 3


def test_em_deterministic():
    X, _ = _three_cluster_data(9)
    g1, t1 = em_fit(X, 3, 4)
    g2, t2 = em_fit(X, 3, 4)
    assert np.array_equal(g1.means, g2.means) and t1 == t2
    with pytest.raises(ConfigurationError):
        em_fit(X[:2], 3, 0)


def test_silhouette_against_sklearn_and_degenerate_cases():
    r = np.random.default_rng(4)
    X = r.normal(size=(60, 3))
    labels = r.integers(0, 3, size=60)
    assert silhouette_score(X, labels) == pytest.approx(sk_silhouette(X, labels), abs=1e-12)
    tight = np.concatenate([r.normal(size=(20, 2)) * 0.01, r.normal(size=(20, 2)) * 0.01 + 50])
    assert silhouette_score(tight, np.repeat([0, 1], 20)) > 0.9
    with pytest.raises(UndefinedMetricError):
        silhouette_score(X, np.zeros(60, dtype=int))
    resp = np.eye(3)[labels]
    assert silhouette_score(X, resp) == silhouette_score(X, labels)
    assert -1 <= silhouette_score(X, r.integers(0, 4, size=60)) <= 1


def test_jensen_shannon_examples():
    same = GaussianMixture([0.5, 0.5], np.zeros((2, 2)), np.stack([np.eye(2)] * 2))
    js, se = jensen_shannon_score(same, 0)
    assert 0 <= js < 0.01 and se > 0
    far = GaussianMixture([0.5, 0.5], np.array([[0.0, 0.0], [20.0, 0.0]]), np.stack([np.eye(2)] * 2))
    assert jensen_shannon_score(far, 0)[0] > 0.99
    assert jensen_shannon_score(far, 5) == jensen_shannon_score(far, 5)
    with pytest.raises(UndefinedMetricError):
        jensen_shannon_score(GaussianMixture([1.0], np.zeros((1, 2)), np.eye(2)[None]), 0)


def test_jensen_shannon_matches_one_dimensional_quadrature():
    mu = 1.5
    g = GaussianMixture([0.5, 0.5], np.array([[0.0], [mu]]), np.ones((2, 1, 1)))
    x = np.linspace(-12, 14, 200_001)
    p = np.exp(-0.5 * x ** 2) / np.sqrt(2 * np.pi)
    q = np.exp(-0.5 * (x - mu) ** 2) / np.sqrt(2 * np.pi)
    m = 0.5 * (p + q)
    exact = 0.5 * np.trapezoid(p * np.log2(p / m) + q * np.log2(q / m), x)
    js, se = jensen_shannon_score(g, 1, samples_per_pair=100_000)
    assert abs(js - exact) < 5 * se + 1e-4


def test_select_k_contracts(tmp_path):
    X, _ = synthetic_regimes(n_per=100, rng=0)
    res = select_k(X, [2], 0, restarts=1)
    assert res.chosen == 2 and len(res.rows) == 1
    res = select_k(X, range(2, 6), 1, restarts=2)
    assert [r["K"] for r in res.rows] == [2, 3, 4, 5] and res.chosen == 3
    res.to_csv(tmp_path / "s.csv")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["K", "silhouette", "jensen_shannon", "loglik", "restarts"] and len(rows) == 5
    with pytest.raises(ConfigurationError):
        select_k(X, [1, 2], 0)


def test_synthetic_regimes_are_equidistant():
    X, labels = synthetic_regimes(n_per=10, dim=8, n_regimes=3, separation=6.0, rng=2)
    assert X.shape == (30, 8) and np.array_equal(np.bincount(labels), [10, 10, 10])
    big, lab = synthetic_regimes(n_per=20_000, dim=8, n_regimes=3, separation=6.0, rng=3)
    c = np.array([big[lab == k].mean(axis=0) for k in range(3)])
    assert np.allclose(pdist(c), 6.0, atol=0.1)


def test_estimator_interface():
    X, _ = _three_cluster_data(1)
    est = GaussianMixtureEM(n_components=3, random_state=0).fit(X)
    assert est.predict(X).shape == (600,)
    assert np.allclose(est.predict_proba(X).sum(axis=1), 1.0)
    assert est.get_params()["n_components"] == 3
    check_get_params_invariance("GaussianMixtureEM", est)
    assert np.isfinite(est.score(X))
