"""Penalized GLM learners for the nuisance functions.

Three model families are provided, all fitted on internally standardized
covariates and reported on the original scale:

* ``fit_elastic_net``: Gaussian elastic net by cyclic coordinate descent.
* ``fit_logistic``: binary logistic elastic net by IRLS with an inner
  coordinate-descent solve.
* ``fit_multinomial``: reference-class softmax regression with an L2 penalty,
  fitted by damped Newton steps with backtracking.

The ``ElasticNet``, ``Multinomial``, ``FixedPropensity`` and
``MembershipWeightedOLS`` classes wrap these into learner objects with a
``fit`` method, which is what the cross-fitting code consumes.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import linalg
from scipy.special import expit, logsumexp

from msrlearner._kernels import cd_gram, irls_logistic

EPS_CLIP = 0.01
TOL_CD = 1e-7
# looser tolerance along CV paths; the selected lambda is refit at TOL_CD
TOL_PATH = 1e-5
MAX_SWEEPS = 10_000
# glmnet-style early stop of a regularization path
DEV_RATIO_STOP = 0.999


class LearnerError(ValueError):
    """Invalid learner input (shape, class coverage, non-finite values)."""


class ConvergenceError(RuntimeError):
    """An iterative solver exhausted its iteration budget."""


def clip_probabilities(p, eps=EPS_CLIP):
    return np.clip(p, eps, 1.0 - eps)


def clip_simplex(P, eps=EPS_CLIP):
    """Clip each row of ``P`` to [eps, 1-eps] and renormalize to sum to one."""
    P = np.asarray(P, dtype=float)
    if P.shape[1] == 1:
        return np.ones_like(P)
    P = np.clip(P, eps, 1.0 - eps)
    return P / P.sum(axis=1, keepdims=True)


def _check_xy(X, y):
    X = np.ascontiguousarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2:
        raise LearnerError(f"X must be 2-D, got shape {X.shape}")
    if X.shape[0] != y.shape[0]:
        raise LearnerError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise LearnerError("non-finite entries in X or y")
    return X, y


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    constant: np.ndarray

    @classmethod
    def fit(cls, X):
        mean = X.mean(axis=0)
        sd = X.std(axis=0)
        constant = sd <= 1e-12 * np.maximum(1.0, np.abs(mean))
        scale = np.where(constant, 1.0, sd)
        return cls(mean, scale, constant)

    def transform(self, X):
        Z = (np.asarray(X, dtype=float) - self.mean) / self.scale
        if self.constant.any():
            Z[:, self.constant] = 0.0
        return np.ascontiguousarray(Z)

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist(),
                "constant": self.constant.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float),
                   np.asarray(d["constant"], dtype=bool))


# ---------------------------------------------------------------------------
# elastic net (gaussian and binomial)


@dataclass(frozen=True)
class ElasticNetModel:
    """Fitted elastic-net GLM.

    ``coef``/``intercept`` act on raw covariates; ``coef_std``/``intercept_std``
    are the solver's coordinates on the standardized design.
    """

    coef: np.ndarray
    intercept: float
    lam: float
    alpha_mix: float
    family: str
    standardizer: Standardizer
    coef_std: np.ndarray
    intercept_std: float
    n_iter: int = 0

    def linear_predictor(self, X):
        return self.intercept + np.asarray(X, dtype=float) @ self.coef

    def predict(self, X):
        eta = self.linear_predictor(X)
        return expit(eta) if self.family == "binomial" else eta

    def loss(self, X, y):
        """Held-out loss: mean squared error or mean binomial deviance."""
        y = np.asarray(y, dtype=float)
        if self.family == "gaussian":
            return float(np.mean((y - self.predict(X)) ** 2))
        eta = self.linear_predictor(X)
        return float(2.0 * np.mean(np.logaddexp(0.0, eta) - y * eta))

    def to_dict(self):
        return {
            "type": "elastic_net",
            "family": self.family,
            "coef": self.coef.tolist(),
            "intercept": self.intercept,
            "lam": self.lam,
            "alpha_mix": self.alpha_mix,
            "standardizer": self.standardizer.to_dict(),
            "coef_std": self.coef_std.tolist(),
            "intercept_std": self.intercept_std,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            coef=np.asarray(d["coef"], dtype=float),
            intercept=float(d["intercept"]),
            lam=float(d["lam"]),
            alpha_mix=float(d["alpha_mix"]),
            family=d["family"],
            standardizer=Standardizer.from_dict(d["standardizer"]),
            coef_std=np.asarray(d["coef_std"], dtype=float),
            intercept_std=float(d["intercept_std"]),
            n_iter=int(d.get("n_iter", 0)),
        )


def _penalties(lam, alpha_mix):
    if lam < 0:
        raise LearnerError(f"lambda must be nonnegative, got {lam}")
    if not 0.0 <= alpha_mix <= 1.0:
        raise LearnerError(f"alpha_mix must lie in [0, 1], got {alpha_mix}")
    return lam * alpha_mix, lam * (1.0 - alpha_mix)


def _unstandardize(std, b0, beta, family, lam, alpha_mix, n_iter):
    coef = beta / std.scale
    coef[std.constant] = 0.0
    intercept = b0 - float(std.mean @ coef)
    return ElasticNetModel(coef, float(intercept), float(lam), float(alpha_mix), family,
                           std, beta.copy(), float(b0), n_iter)


def _gaussian_solve(G, c, beta, lam, alpha_mix, tol, max_sweeps):
    l1, l2 = _penalties(lam, alpha_mix)
    sweeps = cd_gram(G, c, beta, l1, l2, tol, max_sweeps)
    if sweeps < 0:
        raise ConvergenceError(
            f"coordinate descent did not converge in {max_sweeps} sweeps (lambda={lam:g})")
    return sweeps


def fit_elastic_net(X, y, lam, alpha_mix=0.5, *, tol=TOL_CD, max_sweeps=MAX_SWEEPS,
                    warm_start=None):
    """Gaussian elastic net.

    Minimises ``(1/2n)||y - b0 - Zb||^2 + lam*(alpha_mix*|b|_1 + (1-alpha_mix)/2*|b|^2)``
    over the standardized design ``Z``; the intercept is unpenalized.
    """
    X, y = _check_xy(X, y)
    std = Standardizer.fit(X)
    Z = std.transform(X)
    n = X.shape[0]
    ybar = y.mean()
    G = Z.T @ Z / n
    c = Z.T @ (y - ybar) / n
    beta = np.zeros(X.shape[1]) if warm_start is None else warm_start.coef_std.copy()
    sweeps = _gaussian_solve(G, c, beta, lam, alpha_mix, tol, max_sweeps)
    return _unstandardize(std, ybar, beta, "gaussian", lam, alpha_mix, sweeps)


def _logistic_objective(b0, beta, Z, y, l1, l2):
    eta = b0 + Z @ beta
    nll = np.mean(np.logaddexp(0.0, eta) - y * eta)
    return nll + l1 * np.abs(beta).sum() + 0.5 * l2 * beta @ beta


def logistic_loss_and_grad(b0, beta, Z, y, lam, alpha_mix):
    """Smooth part of the logistic elastic-net objective and its gradient.

    The L1 term is excluded from both; the returned gradient is
    ``(d/db0, d/dbeta)``.
    """
    _, l2 = _penalties(lam, alpha_mix)
    eta = b0 + Z @ beta
    f = np.mean(np.logaddexp(0.0, eta) - y * eta) + 0.5 * l2 * beta @ beta
    r = expit(eta) - y
    n = Z.shape[0]
    return f, float(r.sum() / n), Z.T @ r / n + l2 * beta


def _logistic_solve(Z, y, b0, beta, lam, alpha_mix, tol, max_iter, max_sweeps):
    l1, l2 = _penalties(lam, alpha_mix)
    beta = beta.copy()
    b0, it = irls_logistic(Z, y, float(b0), beta, l1, l2, tol, max_iter, max_sweeps)
    if it == -2:
        raise ConvergenceError(f"inner coordinate descent did not converge (lambda={lam:g})")
    if it < 0:
        raise ConvergenceError(f"IRLS did not converge in {max_iter} iterations (lambda={lam:g})")
    return b0, beta, it


def fit_logistic(X, y, lam, alpha_mix=0.5, *, tol=TOL_CD, max_iter=100,
                 max_sweeps=MAX_SWEEPS, warm_start=None):
    """Binary logistic regression with an elastic-net penalty on the slopes.

    Objective on the standardized design: mean negative log-likelihood plus
    ``lam*(alpha_mix*|b|_1 + (1-alpha_mix)/2*|b|^2)``.
    """
    X, y = _check_xy(X, y)
    if not np.all((y == 0) | (y == 1)):
        raise LearnerError("logistic response must be 0/1")
    ybar = y.mean()
    if ybar in (0.0, 1.0):
        raise LearnerError("single-class input")
    std = Standardizer.fit(X)
    Z = std.transform(X)
    if warm_start is None:
        b0, beta = float(np.log(ybar / (1.0 - ybar))), np.zeros(X.shape[1])
    else:
        b0, beta = warm_start.intercept_std, warm_start.coef_std.copy()
    b0, beta, it = _logistic_solve(Z, y, b0, beta, lam, alpha_mix, tol, max_iter, max_sweeps)
    return _unstandardize(std, b0, beta, "binomial", lam, alpha_mix, it)


def kkt_residuals(model, X, y):
    """Per-coordinate violation of the elastic-net optimality conditions.

    Computed on the standardized scale. Active coordinates must satisfy
    ``grad_j + l1*sign(b_j) = 0``; zero coordinates ``|grad_j| <= l1``. The
    first entry is the intercept's stationarity residual.
    """
    X, y = _check_xy(X, y)
    Z = model.standardizer.transform(X)
    l1, l2 = _penalties(model.lam, model.alpha_mix)
    b0, beta = model.intercept_std, model.coef_std
    n = Z.shape[0]
    eta = b0 + Z @ beta
    mu = expit(eta) if model.family == "binomial" else eta
    r = mu - y
    grad = Z.T @ r / n + l2 * beta
    active = beta != 0
    res = np.where(active, np.abs(grad + l1 * np.sign(beta)), np.maximum(np.abs(grad) - l1, 0.0))
    res[model.standardizer.constant] = 0.0
    return np.concatenate([[abs(r.mean())], res])


def lambda_max(X, y, alpha_mix=0.5):
    """Smallest lambda at which every slope is zero (both families)."""
    X, y = _check_xy(X, y)
    Z = Standardizer.fit(X).transform(X)
    if Z.shape[1] == 0:
        return 1.0
    grad = np.abs(Z.T @ (y - y.mean())) / X.shape[0]
    return float(grad.max() / max(alpha_mix, 1e-3))


def lambda_grid(X, y, alpha_mix=0.5, n_lambda=100, min_ratio=1e-4):
    """Geometric grid from ``lambda_max`` down by ``min_ratio``."""
    top = lambda_max(X, y, alpha_mix)
    if top <= 0:
        top = 1e-8
    if n_lambda == 1:
        return np.array([top])
    return top * np.geomspace(1.0, min_ratio, n_lambda)


def elastic_net_path(X, y, lambdas, alpha_mix=0.5, family="gaussian", *, tol=TOL_PATH,
                     max_sweeps=MAX_SWEEPS):
    """Warm-started fits along a decreasing lambda sequence.

    Returns a list of models, one per lambda, possibly shorter than
    ``lambdas``: the path stops once the deviance ratio exceeds 0.999, or
    (with a warning) when a fit fails to converge.
    """
    X, y = _check_xy(X, y)
    std = Standardizer.fit(X)
    Z = std.transform(X)
    n = X.shape[0]
    models = []
    if family == "gaussian":
        ybar = y.mean()
        G = Z.T @ Z / n
        c = Z.T @ (y - ybar) / n
        null_dev = float(np.mean((y - ybar) ** 2))
        beta = np.zeros(X.shape[1])
        for lam in lambdas:
            try:
                sweeps = _gaussian_solve(G, c, beta, lam, alpha_mix, tol, max_sweeps)
            except ConvergenceError as exc:
                warnings.warn(f"elastic-net path truncated: {exc}")
                break
            model = _unstandardize(std, ybar, beta, "gaussian", lam, alpha_mix, sweeps)
            models.append(model)
            dev = float(np.mean((y - ybar - Z @ beta) ** 2))
            if null_dev > 0 and 1.0 - dev / null_dev > DEV_RATIO_STOP:
                break
        return models
    if family != "binomial":
        raise LearnerError(f"unknown family {family!r}")
    if not np.all((y == 0) | (y == 1)):
        raise LearnerError("logistic response must be 0/1")
    ybar = y.mean()
    if ybar in (0.0, 1.0):
        raise LearnerError("single-class input")
    b0, beta = float(np.log(ybar / (1.0 - ybar))), np.zeros(X.shape[1])
    null_dev = float(np.mean(np.logaddexp(0.0, b0) - y * b0))
    for lam in lambdas:
        try:
            b0, beta, it = _logistic_solve(Z, y, b0, beta, lam, alpha_mix, tol, 100, max_sweeps)
        except ConvergenceError as exc:
            warnings.warn(f"logistic path truncated: {exc}")
            break
        models.append(_unstandardize(std, b0, beta, "binomial", lam, alpha_mix, it))
        eta = b0 + Z @ beta
        dev = float(np.mean(np.logaddexp(0.0, eta) - y * eta))
        if 1.0 - dev / null_dev > DEV_RATIO_STOP:
            break
    return models


# ---------------------------------------------------------------------------
# cross-validation


@dataclass(frozen=True)
class CvPlan:
    lambdas: np.ndarray
    n_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        lams = np.asarray(self.lambdas, dtype=float).ravel()
        if lams.size == 0:
            raise LearnerError("empty lambda grid")
        if lams.size > 1 and not np.all(np.diff(lams) < 0):
            raise LearnerError("lambda grid must be strictly decreasing")
        if self.n_folds < 2:
            raise LearnerError("CV needs at least 2 folds")
        object.__setattr__(self, "lambdas", lams)


@dataclass(frozen=True)
class CvResult:
    lam: float
    model: Any
    lambdas: np.ndarray
    mean_loss: np.ndarray
    fold_loss: np.ndarray


def _path(fitter, X, y, lambdas):
    if hasattr(fitter, "path"):
        return fitter.path(X, y, lambdas)
    return [fitter(X, y, lam) for lam in lambdas]


def _loss(fitter, model, X, y):
    if hasattr(fitter, "loss"):
        return fitter.loss(model, X, y)
    return model.loss(X, y)


def cross_validate(fitter, plan, X, y):
    """K-fold selection of lambda by minimum mean held-out loss.

    ``fitter`` is either a learner with ``path``/``loss`` methods (such as
    :class:`ElasticNet`) or a callable ``fitter(X, y, lam) -> model`` whose
    models expose ``loss(X, y)``. Ties go to the larger lambda. The selected
    model is refit on all rows.
    """
    X, y = _check_xy(X, y)
    n = X.shape[0]
    if n < plan.n_folds:
        raise LearnerError(f"n={n} is smaller than the fold count {plan.n_folds}")
    rng = np.random.default_rng(plan.seed)
    folds = np.empty(n, dtype=int)
    folds[rng.permutation(n)] = np.arange(n) % plan.n_folds
    lambdas = plan.lambdas
    full_path = _path(fitter, X, y, lambdas)
    n_ok = len(full_path)
    losses = []
    for q in range(plan.n_folds):
        tr, te = folds != q, folds == q
        path = _path(fitter, X[tr], y[tr], lambdas[:n_ok])
        n_ok = min(n_ok, len(path))
        losses.append([_loss(fitter, m, X[te], y[te]) for m in path])
    if n_ok == 0:
        raise ConvergenceError("no lambda on the grid could be fit in every fold")
    fold_loss = np.array([row[:n_ok] for row in losses])
    mean_loss = fold_loss.mean(axis=0)
    best = int(np.argmin(mean_loss))
    model = full_path[best]
    if hasattr(fitter, "refit"):
        model = fitter.refit(X, y, float(lambdas[best]), model)
    return CvResult(float(lambdas[best]), model, lambdas[:n_ok], mean_loss, fold_loss)


# ---------------------------------------------------------------------------
# multinomial


@dataclass(frozen=True)
class MultinomialModel:
    """Softmax regression with class 1 as the reference (zero coefficients).

    ``coef`` has shape ``(n_classes - 1, p)`` and acts on raw covariates.
    """

    coef: np.ndarray
    intercept: np.ndarray
    lam: float
    n_classes: int
    standardizer: Standardizer | None = None
    n_iter: int = 0
    theta_std: np.ndarray | None = field(default=None, repr=False)

    def linear_predictor(self, X):
        X = np.asarray(X, dtype=float)
        eta = np.zeros((X.shape[0], self.n_classes))
        if self.n_classes > 1:
            eta[:, 1:] = self.intercept + X @ self.coef.T
        return eta

    def predict_proba(self, X):
        eta = self.linear_predictor(X)
        return np.exp(eta - logsumexp(eta, axis=1, keepdims=True))

    def predict(self, X):
        return np.argmax(self.predict_proba(X), axis=1) + 1

    def loss(self, X, s):
        """Mean negative log-likelihood of labels ``s`` in 1..K."""
        eta = self.linear_predictor(X)
        s = np.asarray(s).astype(int)
        lse = logsumexp(eta, axis=1)
        return float(np.mean(lse - eta[np.arange(eta.shape[0]), s - 1]))

    def to_dict(self):
        return {
            "type": "multinomial",
            "coef": self.coef.tolist(),
            "intercept": self.intercept.tolist(),
            "lam": self.lam,
            "n_classes": self.n_classes,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, d):
        k = int(d["n_classes"])
        coef = np.asarray(d["coef"], dtype=float).reshape(max(k - 1, 0), -1)
        return cls(coef, np.asarray(d["intercept"], dtype=float), float(d["lam"]), k,
                   None, int(d.get("n_iter", 0)))


def _augment(Z):
    return np.hstack([np.ones((Z.shape[0], 1)), Z])


def multinomial_loss_and_grad(theta, Z, s, lam):
    """Penalized multinomial objective and gradient.

    ``theta`` has shape ``(K-1, p+1)``, column 0 holding the (unpenalized)
    intercepts; ``s`` holds labels in 1..K.
    """
    Za = _augment(Z)
    n = Za.shape[0]
    km1 = theta.shape[0]
    eta = np.zeros((n, km1 + 1))
    eta[:, 1:] = Za @ theta.T
    lse = logsumexp(eta, axis=1)
    idx = np.asarray(s, dtype=int) - 1
    nll = np.mean(lse - eta[np.arange(n), idx])
    slopes = theta[:, 1:]
    f = nll + 0.5 * lam * np.sum(slopes**2)
    P = np.exp(eta - lse[:, None])
    Y = np.zeros_like(P)
    Y[np.arange(n), idx] = 1.0
    grad = (P - Y)[:, 1:].T @ Za / n
    grad[:, 1:] += lam * slopes
    return float(f), grad


def _multinomial_hessian(theta, Za, lam):
    n, q = Za.shape
    km1 = theta.shape[0]
    eta = np.zeros((n, km1 + 1))
    eta[:, 1:] = Za @ theta.T
    P = np.exp(eta - logsumexp(eta, axis=1, keepdims=True))[:, 1:]
    H = np.zeros((km1, q, km1, q))
    for k in range(km1):
        for l in range(k, km1):
            w = P[:, k] * ((k == l) - P[:, l])
            block = (Za * w[:, None]).T @ Za / n
            H[k, :, l, :] = block
            H[l, :, k, :] = block.T
    H = H.reshape(km1 * q, km1 * q)
    pen = np.tile(np.r_[0.0, np.full(q - 1, lam)], km1)
    H[np.diag_indices_from(H)] += pen
    return H


def fit_multinomial(X, s, n_classes=None, lam=1e-4, *, tol=1e-9, max_iter=200,
                    warm_start=None):
    """L2-penalized multinomial logistic regression (reference class 1).

    The objective is the mean negative log-likelihood plus
    ``lam/2 * sum ||slopes||^2`` on standardized covariates.
    ``warm_start`` is a previous model fit to the same rows.
    """
    s = np.asarray(s).astype(int).ravel()
    X, _ = _check_xy(X, s)
    K = int(n_classes if n_classes is not None else s.max())
    counts = np.bincount(s, minlength=K + 1)[1:]
    if s.min() < 1 or s.max() > K:
        raise LearnerError(f"labels must lie in 1..{K}")
    if np.any(counts == 0):
        missing = [k + 1 for k in np.flatnonzero(counts == 0)]
        raise LearnerError(f"missing class(es) {missing}")
    p = X.shape[1]
    std = Standardizer.fit(X)
    if K == 1:
        return MultinomialModel(np.zeros((0, p)), np.zeros(0), lam, 1, std, 0)
    Z = std.transform(X)
    Za = _augment(Z)
    theta = np.zeros((K - 1, p + 1))
    theta[:, 0] = np.log(counts[1:] / counts[0])
    if warm_start is not None and warm_start.theta_std is not None:
        theta = warm_start.theta_std.copy()
    f, g = multinomial_loss_and_grad(theta, Z, s, lam)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol:
            break
        H = _multinomial_hessian(theta, Za, lam)
        try:
            step = -linalg.solve(H, g.ravel(), assume_a="pos").reshape(theta.shape)
        except (linalg.LinAlgError, ValueError):
            step = -g
        slope = float(np.sum(g * step))
        if slope >= 0:
            step, slope = -g, -float(np.sum(g * g))
        t = 1.0
        while True:
            f_new, g_new = multinomial_loss_and_grad(theta + t * step, Z, s, lam)
            if f_new <= f + 1e-4 * t * slope or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10:
            break
        theta = theta + t * step
        f, g = f_new, g_new
    else:
        if np.max(np.abs(g)) > 1e-6:
            raise ConvergenceError(f"multinomial fit did not converge in {max_iter} iterations")
    slopes = theta[:, 1:] / std.scale
    slopes[:, std.constant] = 0.0
    intercept = theta[:, 0] - slopes @ std.mean
    return MultinomialModel(slopes, intercept, float(lam), K, std, it, theta)


# ---------------------------------------------------------------------------
# learner objects consumed by the cross-fitting code


@dataclass(frozen=True)
class ConstantModel:
    value: float

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], self.value)

    def to_dict(self):
        return {"type": "constant", "value": self.value}


@dataclass(frozen=True)
class ElasticNet:
    """Elastic-net learner; lambda chosen by CV when ``lam`` is None."""

    family: str = "gaussian"
    alpha_mix: float = 0.5
    lam: float | None = None
    n_lambda: int = 100
    lambda_min_ratio: float = 1e-4
    cv_folds: int = 5
    seed: int = 0

    def path(self, X, y, lambdas):
        return elastic_net_path(X, y, lambdas, self.alpha_mix, self.family)

    def loss(self, model, X, y):
        return model.loss(X, y)

    def refit(self, X, y, lam, warm_start=None):
        if self.family == "gaussian":
            return fit_elastic_net(X, y, lam, self.alpha_mix, warm_start=warm_start)
        return fit_logistic(X, y, lam, self.alpha_mix, warm_start=warm_start)

    def fit(self, X, y, *, seed=None):
        X, y = _check_xy(X, y)
        if self.family == "binomial" and y.mean() in (0.0, 1.0):
            raise LearnerError("single-class input")
        if self.lam is not None:
            return self.refit(X, y, self.lam)
        grid = lambda_grid(X, y, self.alpha_mix, self.n_lambda, self.lambda_min_ratio)
        folds = min(self.cv_folds, X.shape[0])
        plan = CvPlan(grid, folds, self.seed if seed is None else seed)
        return cross_validate(self, plan, X, y).model


@dataclass(frozen=True)
class FixedPropensity:
    """Known treatment probability, e.g. 0.5 for a randomized study."""

    value: float = 0.5

    def fit(self, X, y, *, seed=None):
        return ConstantModel(float(self.value))


@dataclass(frozen=True)
class Multinomial:
    """L2 multinomial learner; ``lam=None`` selects the penalty by CV deviance."""

    lam: float | None = 1e-4
    lambdas: tuple = tuple(np.geomspace(10.0, 1e-4, 11))
    cv_folds: int = 5
    seed: int = 0

    def fit(self, X, s, n_classes, *, seed=None):
        if self.lam is not None:
            return fit_multinomial(X, s, n_classes, self.lam)
        plan = CvPlan(np.asarray(self.lambdas), self.cv_folds, self.seed if seed is None else seed)
        return cross_validate(_MultinomialPath(n_classes), plan, X, s).model


@dataclass(frozen=True)
class _MultinomialPath:
    n_classes: int

    def path(self, X, s, lambdas):
        models, warm = [], None
        for lam in lambdas:
            warm = fit_multinomial(X, s, self.n_classes, lam, warm_start=warm)
            models.append(warm)
        return models

    def loss(self, model, X, s):
        return model.loss(X, s)


@dataclass(frozen=True)
class MembershipWeightedModel:
    membership: MultinomialModel
    coef: np.ndarray

    def predict(self, X):
        return _membership_features(self.membership.predict_proba(X), X) @ self.coef


def _membership_features(P, X):
    Xa = np.hstack([np.ones((np.asarray(X).shape[0], 1)), X])
    return (P[:, :, None] * Xa[:, None, :]).reshape(Xa.shape[0], -1)


@dataclass(frozen=True)
class MembershipWeightedOLS:
    """Outcome regression ``sum_k p(k|x) * (c_k0 + x'c_k)``.

    A parametric mean model that is correctly specified when the outcome
    mean is a membership-weighted mixture of study-level linear functions.
    The membership model is fit on the supplied study labels.
    """

    lam_membership: float = 1e-4
    ridge: float = 1e-8
    needs_groups: bool = field(default=True, init=False)

    def fit(self, X, y, groups, n_groups, *, seed=None):
        X, y = _check_xy(X, y)
        memb = fit_multinomial(X, groups, n_groups, self.lam_membership)
        F = _membership_features(memb.predict_proba(X), X)
        n = F.shape[0]
        A = F.T @ F / n + self.ridge * np.eye(F.shape[1])
        coef = linalg.solve(A, F.T @ y / n, assume_a="pos")
        return MembershipWeightedModel(memb, coef)


def model_from_dict(d):
    kind = d["type"]
    if kind == "elastic_net":
        return ElasticNetModel.from_dict(d)
    if kind == "multinomial":
        return MultinomialModel.from_dict(d)
    if kind == "constant":
        return ConstantModel(float(d["value"]))
    raise LearnerError(f"unknown model type {kind!r}")
