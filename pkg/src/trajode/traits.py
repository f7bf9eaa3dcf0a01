"""Linear trait regression from latent codes."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .errors import ConfigurationError, SingularityError, UndefinedMetricError
from .metrics import NRMSE_NORMALIZER, nrmse
from .validation import check_codes, check_targets


DEFAULT_RIDGE = 1e-6


def _closed_form(X, Y, ridge):
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    if ridge == "auto":
        # plain least squares when the centered codes have full column rank
        ridge = 0.0 if np.linalg.matrix_rank(Xc) == X.shape[1] else DEFAULT_RIDGE
    ridge = float(ridge)
    gram = Xc.T @ Xc + ridge * np.eye(X.shape[1])
    if ridge == 0.0 and np.linalg.matrix_rank(gram) < X.shape[1]:
        raise SingularityError("codes are rank deficient; use a positive ridge")
    try:
        A = linalg.solve(gram, Xc.T @ Yc, assume_a="pos").T
    except (linalg.LinAlgError, np.linalg.LinAlgError):
        raise SingularityError("ridge normal equations are singular") from None
    return A, ym - A @ xm


def _gradient(X, Y, lr, iterations, rng):
    m, d = Y.shape[1], X.shape[1]
    rng = ad.make_rng(rng)
    params = {"head.A": 0.01 * rng.standard_normal((m, d)), "head.c": np.zeros(m)}
    state = ad.AdamState(lr=lr, beta1=0.9, beta2=0.999)
    for _ in range(iterations):
        tape = ad.Tape()
        P = tape.watch_all(params)
        loss = ad.mse(ad.affine(X, P["head.A"], P["head.c"]), Y)
        params, state = ad.adam_step(params, tape.gradient(loss), state)
    return params["head.A"], params["head.c"]


def fit_trait_head(codes, targets, method="closed-form", ridge="auto", learning_rate=1e-2,
                   iterations=20_000, rng=0):
    """Fit ``targets ~ A @ code + c``. Returns ``(A, c)`` with A of shape (m, d).

    ``ridge="auto"`` solves plain least squares when the centered codes have
    full column rank and adds ``1e-6 * I`` otherwise.
    """
    X = check_codes(codes)
    Y = check_targets(targets, X.shape[0])
    if method == "closed-form":
        return _closed_form(X, Y, ridge)
    if method == "gradient":
        return _gradient(X, Y, learning_rate, iterations, rng)
    raise ConfigurationError(f"unknown trait head method {method!r}")


class TraitRegressor(RegressorMixin, BaseEstimator):
    """One linear layer from latent code to trait values."""

    def __init__(self, method="closed-form", ridge="auto", learning_rate=1e-2,
                 iterations=20_000, random_state=0):
        self.method = method
        self.ridge = ridge
        self.learning_rate = learning_rate
        self.iterations = iterations
        self.random_state = random_state

    def fit(self, X, y):
        X = check_codes(X)
        Y = check_targets(y, X.shape[0])
        self._single_output = np.ndim(y) == 1
        self.coef_, self.intercept_ = fit_trait_head(
            X, Y, self.method, self.ridge, self.learning_rate, self.iterations, self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_codes(X, dim=self.n_features_in_)
        out = X @ self.coef_.T + self.intercept_
        return out[:, 0] if self._single_output else out


@dataclass
class TraitReport:
    names: list
    values: np.ndarray
    errors: dict = field(default_factory=dict)
    normalizer: str = NRMSE_NORMALIZER

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["trait", "nrmse", "normalizer"])
            for name, v in zip(self.names, self.values):
                w.writerow([name, repr(float(v)), self.normalizer])


def evaluate_traits(head, codes, targets, names=None) -> TraitReport:
    """Per-trait NRMSE. A constant trait column is reported as NaN with its error."""
    X = check_codes(codes)
    Y = check_targets(targets, X.shape[0])
    pred = head.predict(X)
    pred = pred.reshape(Y.shape)
    names = list(names) if names is not None else [f"trait_{k + 1}" for k in range(Y.shape[1])]
    values = np.full(Y.shape[1], np.nan)
    errors = {}
    for k in range(Y.shape[1]):
        try:
            values[k] = nrmse(pred[:, k], Y[:, k])
        except UndefinedMetricError as exc:
            errors[names[k]] = str(exc)
    return TraitReport(names, values, errors)
