"""Pointwise standard errors and confidence intervals for the population effect."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.stats import norm

from msrlearner.estimator import EstimationError


@dataclass(frozen=True, eq=False)
class SandwichComponents:
    """``Q = U'U/n``, ``M = sum e_i^2 u_i u_i' / n`` and ``Omega = Q^-1 M Q^-1``."""

    Q: np.ndarray
    M: np.ndarray
    Omega: np.ndarray
    n: int
    condition_number: float

    def omega_sqrt(self):
        w, V = np.linalg.eigh(self.Omega)
        return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _sym(A):
    return 0.5 * (A + A.T)


def sandwich(design, model):
    """Heteroskedasticity-robust plug-in covariance of ``sqrt(n) (beta_hat - beta)``."""
    U, n = design.U, design.n
    resid = design.y_tilde - U @ model.beta
    Q = _sym(U.T @ U / n)
    M = _sym((U * resid[:, None] ** 2).T @ U / n)
    eig = np.linalg.eigvalsh(Q)
    if eig[0] <= eig[-1] * Q.shape[0] * np.finfo(float).eps:
        raise EstimationError(f"singular Gram matrix (smallest eigenvalue {eig[0]:.3g})")
    cho = linalg.cho_factor(Q)
    Qinv_M = linalg.cho_solve(cho, M)
    Omega = _sym(linalg.cho_solve(cho, Qinv_M.T))
    return SandwichComponents(Q, M, Omega, n, float(eig[-1] / eig[0]))


@dataclass(frozen=True, eq=False)
class Interval:
    tau: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    se: np.ndarray


def loading(model, X):
    """``Z(x) v(x)``: the basis blocks weighted by membership probabilities."""
    X2 = np.atleast_2d(np.asarray(X, dtype=float))
    P = model.membership_proba(X2)
    return np.hstack([P[:, [k - 1]] * model.basis.expand_block(X2, k)
                      for k in range(1, model.K + 1)])


def ci_tau(model, components, X, level=0.95):
    """Normal-approximation interval for ``tau(x)`` at each row of ``X``."""
    if not 0.0 < level < 1.0:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    single = np.asarray(X).ndim == 1
    S = loading(model, X) @ components.omega_sqrt()
    se = np.linalg.norm(S, axis=1) / np.sqrt(components.n)
    tau = np.atleast_1d(model.predict_tau(np.atleast_2d(X)))
    z = norm.ppf(0.5 + level / 2.0)
    out = Interval(tau, tau - z * se, tau + z * se, se)
    if single:
        return Interval(*(float(v[0]) for v in (out.tau, out.lo, out.hi, out.se)))
    return out
