"""Multi-study R-learner: blocked design, R-loss and the penalized series fit.

For row ``i`` the regressor is ``u_i = (u_i1, ..., u_iK)`` with blocks

    u_ik = (A_i - e_k(X_i)) * p(k | X_i) * v_k(X_i)

and the response is ``Y_i - m(X_i)``. The coefficient vector minimizes the
mean squared residual plus a ridge penalty, which has a closed form.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import expit

from msrlearner.dataset import BasisSpec, DataError
from msrlearner.learners import EPS_CLIP, MultinomialModel, clip_simplex

DEFAULT_LAMBDA_TAU = 1e-6


class EstimationError(ValueError):
    """The R-loss system cannot be solved as posed."""


@dataclass(frozen=True, eq=False)
class Design:
    """Blocked regressors ``U`` (n x d) and residualized outcomes ``y_tilde``."""

    U: np.ndarray
    y_tilde: np.ndarray
    basis: BasisSpec

    @property
    def n(self):
        return self.U.shape[0]

    @property
    def d(self):
        return self.U.shape[1]

    def gram(self):
        return self.U.T @ self.U / self.n

    def subset(self, rows):
        return Design(self.U[rows], self.y_tilde[rows], self.basis)


def design_rows(A, e_hat, p_hat, V_blocks):
    """Stack ``(A - e_k) * p_k * v_k`` over k; ``V_blocks`` holds each ``v_k(X)``."""
    A = np.asarray(A, dtype=float)
    w = (A[:, None] - e_hat) * p_hat
    return np.hstack([w[:, [k]] * V for k, V in enumerate(V_blocks)])


def build_design(data, nuisances, basis):
    """The blocked design for ``data`` given per-row nuisance values."""
    K = data.K
    if basis.K != K:
        raise DataError(f"basis has {basis.K} blocks but data has K={K}")
    if nuisances.m_hat.shape != (data.n,) or nuisances.e_hat.shape != (data.n, K) \
            or nuisances.p_hat.shape != (data.n, K):
        raise DataError(
            f"nuisance shapes {nuisances.m_hat.shape}, {nuisances.e_hat.shape}, "
            f"{nuisances.p_hat.shape} do not match n={data.n}, K={K}")
    X = data.covariates
    V = [basis.expand_block(X, k) for k in range(1, K + 1)]
    U = design_rows(data.treatments, nuisances.e_hat, nuisances.p_hat, V)
    return Design(U, data.outcomes - nuisances.m_hat, basis)


def loss(design, beta):
    """Mean squared R-loss residual ``(1/n) sum (y_tilde - u'beta)^2``."""
    r = design.y_tilde - design.U @ np.asarray(beta, dtype=float)
    return float(r @ r / design.n)


@dataclass(frozen=True)
class Penalty:
    """Ridge penalty ``lam * sum_j w_j beta_j^2``.

    ``weights`` (length d) overrides the default of 1 for every coordinate
    and 0 for per-study intercepts (unless ``penalize_intercept``).
    """

    lam: float = DEFAULT_LAMBDA_TAU
    weights: tuple | None = None
    penalize_intercept: bool = False

    def matrix(self, basis):
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (basis.d,):
                raise DataError(f"penalty weights have length {w.size}, expected {basis.d}")
        else:
            w = np.ones(basis.d)
            if not self.penalize_intercept:
                w[basis.intercept_mask] = 0.0
        return np.diag(w)

    def to_dict(self):
        return {"lam": self.lam, "weights": None if self.weights is None else list(self.weights),
                "penalize_intercept": self.penalize_intercept}


def penalized_objective(design, beta, penalty):
    beta = np.asarray(beta, dtype=float)
    return loss(design, beta) + penalty.lam * beta @ penalty.matrix(design.basis) @ beta


def solve(design, penalty):
    """``(U'U/n + lam P)^{-1} U'y/n`` by a Cholesky factorization."""
    if penalty.lam < 0:
        raise EstimationError(f"penalty must be nonnegative, got {penalty.lam}")
    if not (np.all(np.isfinite(design.U)) and np.all(np.isfinite(design.y_tilde))):
        raise EstimationError("non-finite design")
    G = design.gram()
    H = G + penalty.lam * penalty.matrix(design.basis)
    rhs = design.U.T @ design.y_tilde / design.n
    eig = np.linalg.eigvalsh(H)
    top = max(eig[-1], 0.0)
    rank = int(np.sum(eig > top * H.shape[0] * np.finfo(float).eps))
    if rank < H.shape[0]:
        raise EstimationError(f"singular R-loss system: rank {rank} of {H.shape[0]}")
    try:
        return linalg.cho_solve(linalg.cho_factor(H), rhs), float(eig[-1] / eig[0])
    except linalg.LinAlgError:
        return linalg.solve(H, rhs, assume_a="sym"), float(eig[-1] / eig[0])


def bounded_transform(t):
    """Map an effect on the real line to (-1, 1) via ``2 expit(t) - 1``."""
    return 2.0 * expit(t) - 1.0


@dataclass(frozen=True, eq=False)
class TreatmentEffectModel:
    """Fitted coefficient blocks with what is needed to predict and do inference.

    ``gram`` and ``residuals`` are kept from the training design for the
    sandwich variance.
    """

    beta: np.ndarray
    basis: BasisSpec
    penalty: Penalty
    membership: object = None
    clip: float = EPS_CLIP
    gram: np.ndarray | None = None
    residuals: np.ndarray | None = None
    condition_number: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def K(self):
        return self.basis.K

    def block(self, k):
        if not 1 <= k <= self.K:
            raise DataError(f"study {k} outside 1..{self.K}")
        return self.beta[self.basis.slices[k - 1]]

    def predict_tau_k(self, X, k):
        """``v_k(x)' beta_k``; accepts one covariate vector or a matrix."""
        X = np.asarray(X, dtype=float)
        beta_k = self.block(k)
        out = self.basis.expand_block(X, k) @ beta_k
        return out[0] if X.ndim == 1 else out

    def predict_tau_blocks(self, X):
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        return np.column_stack([self.predict_tau_k(X2, k) for k in range(1, self.K + 1)])

    def membership_proba(self, X):
        X2 = np.atleast_2d(np.asarray(X, dtype=float))
        if self.K == 1:
            return np.ones((X2.shape[0], 1))
        if self.membership is None:
            raise EstimationError("model has no membership model for K > 1")
        return clip_simplex(self.membership.predict_proba(X2), self.clip)

    def predict_tau(self, X):
        """Population effect ``sum_k p(k|x) tau_k(x)``."""
        X = np.asarray(X, dtype=float)
        out = np.sum(self.membership_proba(X) * self.predict_tau_blocks(X), axis=1)
        return out[0] if X.ndim == 1 else out

    def to_dict(self):
        memb = None
        if self.membership is not None:
            if not hasattr(self.membership, "to_dict"):
                raise EstimationError("membership model is not serializable")
            memb = self.membership.to_dict()
        return {"beta": self.beta.tolist(), "basis": self.basis.to_dict(),
                "penalty": self.penalty.to_dict(), "membership": memb, "clip": self.clip,
                "condition_number": self.condition_number, "meta": self.meta}

    @classmethod
    def from_dict(cls, d):
        pen = d["penalty"]
        penalty = Penalty(pen["lam"], None if pen["weights"] is None else tuple(pen["weights"]),
                          pen["penalize_intercept"])
        memb = MultinomialModel.from_dict(d["membership"]) if d.get("membership") else None
        return cls(np.asarray(d["beta"], dtype=float), BasisSpec.from_dict(d["basis"]), penalty,
                   memb, d.get("clip", EPS_CLIP), condition_number=d.get("condition_number", np.nan),
                   meta=d.get("meta", {}))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def fit(design, penalty=None, membership=None, *, clip=EPS_CLIP):
    """Closed-form penalized least squares on a blocked design."""
    penalty = penalty or Penalty()
    beta, cond = solve(design, penalty)
    resid = design.y_tilde - design.U @ beta
    return TreatmentEffectModel(beta, design.basis, penalty, membership, clip,
                                design.gram(), resid, cond)


def cv_lambda_tau(design, lambdas, n_folds=5, seed=0):
    """Ridge strength with the smallest held-out R-loss; ties go to the larger value."""
    lambdas = np.sort(np.asarray(lambdas, dtype=float))[::-1]
    folds = np.random.default_rng(seed).permutation(design.n) % n_folds
    err = np.zeros(lambdas.size)
    for q in range(n_folds):
        tr, te = folds != q, folds == q
        for j, lam in enumerate(lambdas):
            beta, _ = solve(design.subset(tr), Penalty(lam))
            err[j] += loss(design.subset(te), beta) * te.sum()
    return float(lambdas[int(np.argmin(err))])


VARIANTS = ("multistudy", "pooled", "perstudy")


def fit_rlearner(data, nuisances, basis, penalty=None, *, variant="multistudy"):
    """Fit one of the three R-learner variants.

    ``multistudy`` uses the estimated memberships. ``perstudy`` replaces them
    by the observed study indicators, which decouples the blocks into
    separate per-study fits; it still uses the fitted membership model to
    combine ``tau_k`` at prediction time. ``pooled`` expects ``data`` and
    ``nuisances`` for the studies merged into one (``data.pooled()``) and a
    single-block basis.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if variant == "pooled" and data.K != 1:
        raise DataError("the pooled variant needs merged (K=1) data")
    if variant == "perstudy":
        nuisances = nuisances.with_memberships(data.one_hot())
    design = build_design(data, nuisances, basis)
    clip = 0.0 if nuisances.provenance == "oracle" else EPS_CLIP
    return fit(design, penalty, nuisances.membership_full if data.K > 1 else None, clip=clip)


def permute_model(model, perm):
    """The same fit expressed with study ``k`` relabeled as ``perm[k-1]``."""
    new_basis = model.basis.permuted(perm)
    beta = np.empty_like(model.beta)
    for k, target in enumerate(perm, start=1):
        beta[new_basis.slices[target - 1]] = model.block(k)
    return replace(model, beta=beta, basis=new_basis, gram=None, residuals=None)
