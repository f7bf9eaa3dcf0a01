"""Gaussian mixture over latent codes: EM fitting and cluster-count selection."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .autodiff import make_rng, split_rng
from .errors import (ConfigurationError, DataError, EmptyClusterError, FactorizationError,
                     NumericError, UndefinedMetricError)
from .validation import check_codes

log = logging.getLogger(__name__)

EMPTY_FRACTION = 1e-8
RIDGE_SCALE = 1e-6


@dataclass
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        self.covariances = np.asarray(self.covariances, dtype=np.float64)
        K, d = self.means.shape
        if self.weights.shape != (K,) or self.covariances.shape != (K, d, d):
            raise DataError("mixture parameter shapes are inconsistent")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DataError("mixture weights must lie on the simplex")

    @property
    def n_components(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    def cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.covariances)
        except np.linalg.LinAlgError:
            raise FactorizationError("a mixture covariance is not positive definite") from None

    def sample(self, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
        rng = make_rng(rng)
        labels = rng.choice(self.n_components, size=n, p=self.weights)
        L = self.cholesky()
        eps = rng.standard_normal((n, self.dim))
        X = self.means[labels] + np.einsum("nij,nj->ni", L[labels], eps)
        return X, labels


def gaussian_log_pdf(X: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log N(x | mean, L L^T) for each row of X."""
    d = mean.shape[0]
    sol = solve_triangular(chol, (X - mean).T, lower=True)
    maha = np.sum(sol * sol, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2 * np.pi) + logdet + maha)


def component_log_densities(X, gmm: GaussianMixture) -> np.ndarray:
    """(N, K) matrix of log pi_k + log N(x_n | mu_k, Sigma_k)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    L = gmm.cholesky()
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    return np.stack([logw[k] + gaussian_log_pdf(X, gmm.means[k], L[k])
                     for k in range(gmm.n_components)], axis=1)


def log_density(z, gmm: GaussianMixture):
    """log sum_k pi_k N(z | mu_k, Sigma_k); scalar for one code, array for a matrix."""
    z = np.asarray(z, dtype=np.float64)
    out = logsumexp(component_log_densities(z, gmm), axis=1)
    return float(out[0]) if z.ndim == 1 else out


def e_step(X, gmm: GaussianMixture) -> np.ndarray:
    """Posterior responsibilities, rows normalized to sum to one."""
    lp = component_log_densities(X, gmm)
    resp = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
    return resp / resp.sum(axis=1, keepdims=True)


def default_ridge(X) -> float:
    X = np.atleast_2d(X)
    cov = np.cov(X, rowvar=False, bias=True).reshape(X.shape[1], X.shape[1])
    return RIDGE_SCALE * float(np.trace(cov)) / X.shape[1]


def m_step(X, resp, ridge: float | None = None) -> GaussianMixture:
    """Weighted maximum-likelihood update with ``ridge * I`` added to each covariance."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    resp = np.asarray(resp, dtype=np.float64)
    N, d = X.shape
    if resp.shape[0] != N:
        raise DataError("responsibilities and codes disagree on N")
    if ridge is None:
        ridge = default_ridge(X)
    Nk = resp.sum(axis=0)
    for k, mass in enumerate(Nk):
        if mass < EMPTY_FRACTION * N:
            raise EmptyClusterError(k, mass)
    means = (resp.T @ X) / Nk[:, None]
    covs = np.empty((len(Nk), d, d))
    for k in range(len(Nk)):
        diff = X - means[k]
        covs[k] = (resp[:, k, None] * diff).T @ diff / Nk[k] + ridge * np.eye(d)
        covs[k] = 0.5 * (covs[k] + covs[k].T)
    weights = Nk / N
    return GaussianMixture(weights / weights.sum(), means, covs)


def kmeanspp_means(X, K: int, rng, local_trials: int | None = None) -> np.ndarray:
    """Greedy distance-squared seeding: each pick is the best of a few D^2 draws."""
    rng = make_rng(rng)
    N = X.shape[0]
    trials = local_trials or 2 + int(np.log(K))
    centers = [X[rng.integers(N)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total <= 0:
            cand = rng.integers(N, size=trials)
        else:
            cand = rng.choice(N, size=trials, p=d2 / total)
        best, best_pot, best_d2 = None, np.inf, None
        for c in cand:
            nd2 = np.minimum(d2, np.sum((X - X[c]) ** 2, axis=1))
            pot = nd2.sum()
            if pot < best_pot:
                best, best_pot, best_d2 = c, pot, nd2
        centers.append(X[best])
        d2 = best_d2
    return np.array(centers)


def _initial_mixture(X, K, rng, ridge):
    d = X.shape[1]
    cov = np.cov(X, rowvar=False, bias=True).reshape(d, d) + ridge * np.eye(d)
    return GaussianMixture(np.full(K, 1.0 / K), kmeanspp_means(X, K, rng),
                           np.repeat(cov[None], K, axis=0))


def _reseed(X, gmm, k, rng, ridge):
    others = np.delete(gmm.means, k, axis=0)
    d2 = np.min(((X[:, None, :] - others[None]) ** 2).sum(-1), axis=1)
    p = d2 / d2.sum() if d2.sum() > 0 else None
    means = gmm.means.copy()
    means[k] = X[make_rng(rng).choice(len(X), p=p)]
    d = X.shape[1]
    covs = gmm.covariances.copy()
    covs[k] = np.cov(X, rowvar=False, bias=True).reshape(d, d) + ridge * np.eye(d)
    return GaussianMixture(np.full(gmm.n_components, 1.0 / gmm.n_components), means, covs)


def em_fit(X, K: int, rng, max_iter: int = 200, tol: float = 1e-6):
    """Fit a K-component mixture by EM.

    Returns ``(gmm, trace)`` where ``trace`` holds the mean per-code
    log-likelihood before each M step and after the final one.
    """
    X = check_codes(X)
    N = X.shape[0]
    if K < 1 or N < K:
        raise ConfigurationError(f"need 1 <= K <= N, got K={K}, N={N}")
    rng = make_rng(rng)
    ridge = default_ridge(X)
    gmm = _initial_mixture(X, K, rng, ridge)
    trace = []
    reseeded = False
    for _ in range(max_iter):
        lp = component_log_densities(X, gmm)
        ll = float(np.mean(logsumexp(lp, axis=1)))
        if not np.isfinite(ll):
            raise NumericError("EM log-likelihood is not finite")
        if trace and ll - trace[-1] < tol:
            trace.append(ll)
            return gmm, trace
        trace.append(ll)
        resp = np.exp(lp - logsumexp(lp, axis=1, keepdims=True))
        resp /= resp.sum(axis=1, keepdims=True)
        try:
            gmm = m_step(X, resp, ridge)
        except EmptyClusterError as exc:
            if reseeded:
                raise
            reseeded = True
            log.info("reseeding empty component %d", exc.component)
            gmm = _reseed(X, gmm, exc.component, rng, ridge)
            trace.clear()
    trace.append(float(np.mean(log_density(X, gmm))))
    return gmm, trace


def hard_labels(resp) -> np.ndarray:
    return np.argmax(np.asarray(resp), axis=1)


def silhouette_score(X, resp) -> float:
    """Mean silhouette (b - a) / max(a, b) with Euclidean distances.

    ``resp`` may be responsibilities (N, K) or integer labels (N,).
    Singleton clusters contribute 0.
    """
    X = check_codes(X)
    resp = np.asarray(resp)
    labels = hard_labels(resp) if resp.ndim == 2 else resp.astype(int)
    clusters = np.unique(labels)
    if clusters.size < 2:
        raise UndefinedMetricError("silhouette needs at least two populated clusters")
    sq = np.sum(X * X, axis=1)
    D = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0))
    np.fill_diagonal(D, 0.0)
    onehot = labels[:, None] == clusters[None, :]
    sizes = onehot.sum(axis=0)
    sums = D @ onehot
    own = np.searchsorted(clusters, labels)
    n_own = sizes[own]
    a = sums[np.arange(len(X)), own] / np.maximum(n_own - 1, 1)
    mean_other = sums / sizes
    mean_other[np.arange(len(X)), own] = np.inf
    b = mean_other.min(axis=1)
    denom = np.maximum(a, b)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where((n_own > 1) & (denom > 0), (b - a) / denom, 0.0)
    return float(np.clip(s.mean(), -1.0, 1.0))


def _pair_js(mean_p, chol_p, mean_q, chol_q, n, rng):
    d = mean_p.shape[0]
    xp = mean_p + rng.standard_normal((n, d)) @ chol_p.T
    xq = mean_q + rng.standard_normal((n, d)) @ chol_q.T
    ln2 = np.log(2.0)

    def terms(x, own, other):
        lo = gaussian_log_pdf(x, *own)
        lt = gaussian_log_pdf(x, *other)
        return (lo - (np.logaddexp(lo, lt) - ln2)) / ln2

    tp = terms(xp, (mean_p, chol_p), (mean_q, chol_q))
    tq = terms(xq, (mean_q, chol_q), (mean_p, chol_p))
    js = 0.5 * (tp.mean() + tq.mean())
    se = 0.5 * np.sqrt(tp.var(ddof=1) / n + tq.var(ddof=1) / n)
    return float(np.clip(js, 0.0, 1.0)), float(se)


def jensen_shannon_score(gmm: GaussianMixture, rng, samples_per_pair: int = 10_000):
    """Mean pairwise Jensen-Shannon divergence (base 2) between components.

    Monte-Carlo estimate; returns ``(score, standard_error)``.
    """
    K = gmm.n_components
    if K < 2:
        raise UndefinedMetricError("Jensen-Shannon score needs at least two components")
    rng = make_rng(rng)
    L = gmm.cholesky()
    vals, ses = [], []
    for i in range(K):
        for j in range(i + 1, K):
            js, se = _pair_js(gmm.means[i], L[i], gmm.means[j], L[j], samples_per_pair, rng)
            vals.append(js)
            ses.append(se)
    return float(np.mean(vals)), float(np.sqrt(np.sum(np.square(ses))) / len(vals))


@dataclass
class SelectionResult:
    rows: list = field(default_factory=list)
    chosen: int | None = None
    mixtures: dict = field(default_factory=dict)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "silhouette", "jensen_shannon", "loglik", "restarts"])
            for r in self.rows:
                w.writerow([r["K"], repr(r["silhouette"]), repr(r["jensen_shannon"]),
                            repr(r["loglik"]), r["restarts"]])


def fit_best(X, K, rng, restarts=3, max_iter=200, tol=1e-6):
    """Best of ``restarts`` EM runs by final log-likelihood."""
    best = None
    errors = []
    for sub in split_rng(make_rng(rng), restarts):
        try:
            gmm, trace = em_fit(X, K, sub, max_iter, tol)
        except (NumericError, FactorizationError) as exc:
            errors.append(exc)
            continue
        if best is None or trace[-1] > best[1][-1]:
            best = (gmm, trace)
    if best is None:
        raise errors[-1]
    return best


def select_k(X, k_range, rng, restarts: int = 3, samples_per_pair: int = 10_000,
             max_iter: int = 200, tol: float = 1e-6) -> SelectionResult:
    """Score every K and choose the one maximizing silhouette minus Jensen-Shannon."""
    X = check_codes(X)
    ks = list(k_range)
    if not ks or min(ks) < 2 or max(ks) > X.shape[0]:
        raise ConfigurationError(f"k_range must lie within [2, {X.shape[0]}]")
    result = SelectionResult()
    rngs = split_rng(make_rng(rng), len(ks))
    best_score = -np.inf
    for K, sub in zip(ks, rngs):
        fit_rng, js_rng = split_rng(sub, 2)
        row = {"K": K, "silhouette": float("nan"), "jensen_shannon": float("nan"),
               "loglik": float("nan"), "restarts": restarts}
        try:
            gmm, trace = fit_best(X, K, fit_rng, restarts, max_iter, tol)
            row["loglik"] = trace[-1]
            row["silhouette"] = silhouette_score(X, e_step(X, gmm))
            row["jensen_shannon"] = jensen_shannon_score(gmm, js_rng, samples_per_pair)[0]
            result.mixtures[K] = gmm
        except (NumericError, FactorizationError, UndefinedMetricError) as exc:
            log.warning("K=%d failed: %s", K, exc)
            row["error"] = str(exc)
        result.rows.append(row)
        combined = row["silhouette"] - row["jensen_shannon"]
        if np.isfinite(combined) and combined > best_score:
            best_score, result.chosen = combined, K
    return result


def synthetic_regimes(n_per: int = 100, dim: int = 8, n_regimes: int = 3, separation: float = 8.0,
                      rng=0) -> tuple[np.ndarray, np.ndarray]:
    """Isotropic unit-variance clusters whose centers are ``separation`` apart pairwise."""
    rng = make_rng(rng)
    if n_regimes > dim + 1:
        raise ConfigurationError("too many regimes for an equidistant layout in this dimension")
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    # rows of an orthonormal basis of the centered simplex are sqrt(2) apart
    U = np.linalg.svd(np.eye(n_regimes) - 1.0 / n_regimes)[0][:, : n_regimes - 1]
    centers = U @ basis[: n_regimes - 1] * (separation / np.sqrt(2.0))
    labels = np.repeat(np.arange(n_regimes), n_per)
    X = centers[labels] + rng.standard_normal((len(labels), dim))
    return X, labels


class GaussianMixtureEM(ClusterMixin, BaseEstimator):
    """EM-fitted Gaussian mixture with the scikit-learn estimator interface."""

    def __init__(self, n_components=3, max_iter=200, tol=1e-6, restarts=1, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.restarts = restarts
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_codes(X)
        self.mixture_, self.loglik_trace_ = fit_best(
            X, self.n_components, make_rng(self.random_state), self.restarts,
            self.max_iter, self.tol)
        self.weights_ = self.mixture_.weights
        self.means_ = self.mixture_.means
        self.covariances_ = self.mixture_.covariances
        self.labels_ = hard_labels(e_step(X, self.mixture_))
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "mixture_")
        return e_step(check_codes(X, dim=self.means_.shape[1]), self.mixture_)

    def predict(self, X):
        return hard_labels(self.predict_proba(X))

    def score_samples(self, X):
        check_is_fitted(self, "mixture_")
        return log_density(check_codes(X, dim=self.means_.shape[1]), self.mixture_)

    def score(self, X, y=None):
        return float(np.mean(self.score_samples(X)))
