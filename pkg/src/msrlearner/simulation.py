"""Data generators for the linear/nonlinear scenarios and the binary-outcome experiment.

Every generator returns a :class:`MultiStudyDataset` together with a
:class:`GeneratedTruth`, which carries the true nuisance and effect values
for each row plus a :class:`TruthModel` that evaluates them at new points.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, logsumexp, softmax

from msrlearner.crossfit import OracleMembership, oracle_nuisances
from msrlearner.dataset import (
    BasisBlock,
    BasisSpec,
    CubicSpline,
    DataError,
    MultiStudyDataset,
    Raw,
    linear_basis,
    spline_basis,
)

SCENARIOS = ("A", "B", "C", "D")
SIGMA2_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)

# Class-specific linear predictors for K = 4 (class 1 is the reference),
# as (intercept, {1-based covariate index: coefficient}).
PRESET_MEMBERSHIP = (
    (-0.841, {1: 1.384, 13: -0.158, 14: -1.072, 27: 1.499, 36: -1.010, 37: -2.0,
              39: -0.143, 40: 1.55}),
    (-0.113, {2: 0.233, 11: -1.272, 13: -0.205, 15: 0.347, 16: 0.0323, 20: 0.121,
              33: 0.926, 34: -1.062}),
    (-1.351, {5: -0.202, 10: 1.059, 13: 1.243, 20: 0.732, 21: 0.456, 24: 0.648,
              35: -0.392, 37: 0.752}),
)


def preset_membership(p=40):
    """Intercepts (3,) and slopes (3, p) of the K = 4 preset membership model."""
    if p < 40:
        raise DataError(f"the preset membership model uses 40 covariates, got p={p}")
    b0 = np.array([c for c, _ in PRESET_MEMBERSHIP])
    B = np.zeros((3, p))
    for r, (_, coefs) in enumerate(PRESET_MEMBERSHIP):
        for j, v in coefs.items():
            B[r, j - 1] = v
    return b0, B


def reference_softmax(X, intercepts, slopes):
    """``p_1 = 1/(1 + sum exp(eta_k))``, ``p_k = exp(eta_k)/(...)`` for k >= 2."""
    eta = np.atleast_2d(X) @ slopes.T + intercepts
    full = np.hstack([np.zeros((eta.shape[0], 1)), eta])
    return softmax(full, axis=1)


# ---------------------------------------------------------------------------
# truth models


class TruthModel:
    """Known functions of x for each study; subclasses fill in the pieces."""

    K: int

    def tau_k(self, X):
        raise NotImplementedError

    def mu0(self, X):
        raise NotImplementedError

    def propensity(self, X):
        raise NotImplementedError

    def membership(self, X):
        raise NotImplementedError

    def tau(self, X):
        return np.sum(self.membership(X) * self.tau_k(X), axis=1)

    def m(self, X):
        """``sum_k {mu_k(x) + e_k(x) tau_k(x)} p(k|x)``."""
        P = self.membership(X)
        return np.sum((self.mu0(X) + self.propensity(X) * self.tau_k(X)) * P, axis=1)

    def oracle(self, data):
        """Oracle nuisance estimates for the rows of ``data``."""
        e = [(lambda X, k=k: self.propensity(X)[:, k]) for k in range(self.K)]
        return oracle_nuisances(data, self.m, e, self.membership)

    def membership_model(self):
        return OracleMembership(self.membership)


@dataclass(frozen=True)
class ScenarioConfig:
    """Settings for one scenario draw.

    ``coef_seed`` fixes the coefficient draws independently of ``seed`` so
    that replicates can share one truth. ``membership`` is ``"preset"``
    (K = 4, p >= 40 only) or ``"random"``.
    """

    scenario: str = "A"
    K: int = 4
    n: int = 400
    p: int = 40
    sigma2_tau: float = 0.0
    p_o: float = 1.0
    n_active: int = 8
    membership: str = "preset"
    shared_fixed_effects: bool = True
    coef_seed: int | None = None
    min_study_size: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise DataError(f"unknown scenario {self.scenario!r}")
        if self.K < 1 or self.n < self.K or self.p < 1:
            raise DataError(f"invalid sizes K={self.K}, n={self.n}, p={self.p}")
        if self.sigma2_tau < 0:
            raise DataError("sigma2_tau must be nonnegative")
        if not 0.0 <= self.p_o <= 1.0:
            raise DataError("p_o must lie in [0, 1]")
        if self.membership not in ("preset", "random"):
            raise DataError(f"unknown membership option {self.membership!r}")
        if self.membership == "preset" and (self.K != 4 or self.p < 40):
            raise DataError("the preset membership model needs K=4 and p>=40")
        common = self.p_o * self.n_active
        if abs(common - round(common)) > 1e-9:
            raise DataError(f"p_o * n_active = {common:g} is not an integer")
        private = self.n_active - round(common)
        if round(common) + self.K * private > self.p:
            raise DataError(
                f"infeasible overlap: {round(common)} shared + {self.K}x{private} private "
                f"covariates exceed p={self.p}")

    @property
    def nonlinear(self):
        return self.scenario in ("C", "D")

    @property
    def randomized(self):
        return self.scenario in ("A", "C")

    def basis(self):
        """The fitting basis: linear, or with the cubic spline in covariate 0."""
        if self.nonlinear:
            return spline_basis(self.K, self.p, 0)
        return linear_basis(self.K, self.p)


def active_sets(K, p, n_active, p_o, rng, force_first=False):
    """Per-study supports with ``p_o * n_active`` shared covariates."""
    n_common = int(round(p_o * n_active))
    n_private = n_active - n_common
    order = rng.permutation(p)
    if force_first:
        order = np.concatenate([[0], order[order != 0]])
    common = order[:n_common]
    out = []
    for k in range(K):
        start = n_common + k * n_private
        out.append(np.sort(np.concatenate([common, order[start:start + n_private]])))
    return out


@dataclass(frozen=True, eq=False)
class ScenarioModel(TruthModel):
    """Linear or spline-expanded effects on study-specific supports.

    ``tau_coef`` has one row per study over the expanded covariates
    ``[x1, x1^2, x1^3, (x1)_+^3, x2, ..., xp]`` (nonlinear) or ``x`` (linear).
    """

    K: int
    p: int
    nonlinear: bool
    supports: tuple
    tau_coef: np.ndarray
    mu_coef: np.ndarray
    e_coef: np.ndarray | None
    memb_intercept: np.ndarray
    memb_slope: np.ndarray
    fixed_effects: np.ndarray = field(default=None)
    random_effects: np.ndarray = field(default=None)

    def expanded(self, X):
        X = np.atleast_2d(X)
        if not self.nonlinear:
            return X
        return np.hstack([CubicSpline(0).evaluate(X), X[:, 1:]])

    def tau_k(self, X):
        return self.expanded(X) @ self.tau_coef.T

    def mu0(self, X):
        return np.atleast_2d(X) @ self.mu_coef.T

    def propensity(self, X):
        X = np.atleast_2d(X)
        if self.e_coef is None:
            return np.full((X.shape[0], self.K), 0.5)
        return expit(X @ self.e_coef.T)

    def membership(self, X):
        if self.K == 1:
            return np.ones((np.atleast_2d(X).shape[0], 1))
        return reference_softmax(X, self.memb_intercept, self.memb_slope)

    def coefficients(self):
        return {"supports": [s.tolist() for s in self.supports],
                "tau": self.tau_coef.tolist(), "tau_fixed": self.fixed_effects.tolist(),
                "tau_random": self.random_effects.tolist(), "mu0": self.mu_coef.tolist(),
                "propensity": None if self.e_coef is None else self.e_coef.tolist(),
                "membership_intercept": self.memb_intercept.tolist(),
                "membership_slope": self.memb_slope.tolist()}


def _expanded_columns(support, nonlinear):
    """Columns of the expanded covariate vector belonging to ``support``."""
    if not nonlinear:
        return np.asarray(support)
    cols = []
    for j in support:
        cols.extend([0, 1, 2, 3] if j == 0 else [j + 3])
    return np.asarray(cols, dtype=int)


def draw_scenario_model(cfg, rng):
    """Coefficients for one scenario; ``rng`` drives every draw."""
    K, p = cfg.K, cfg.p
    supports = active_sets(K, p, cfg.n_active, cfg.p_o, rng, force_first=cfg.nonlinear)
    width = p + 3 if cfg.nonlinear else p
    shared = rng.normal(2.0, 1.0, width)
    fixed = np.empty((K, width))
    random = np.zeros((K, width))
    tau = np.zeros((K, width))
    mu = np.zeros((K, p))
    e = None if cfg.randomized else np.zeros((K, p))
    for k, supp in enumerate(supports):
        cols = _expanded_columns(supp, cfg.nonlinear)
        fixed[k] = shared if cfg.shared_fixed_effects else rng.normal(2.0, 1.0, width)
        random[k, cols] = rng.normal(0.0, np.sqrt(cfg.sigma2_tau), cols.size)
        tau[k, cols] = fixed[k, cols] + random[k, cols]
        mu[k, supp] = rng.normal(0.0, 1.0, supp.size)
        if e is not None:
            e[k, supp] = rng.normal(0.0, 1.0, supp.size)
    if K == 1:
        b0, B = np.zeros(0), np.zeros((0, p))
    elif cfg.membership == "preset":
        b0, B = preset_membership(p)
    else:
        b0 = rng.normal(0.0, 1.0, K - 1)
        B = np.zeros((K - 1, p))
        for r in range(K - 1):
            idx = rng.choice(p, size=min(8, p), replace=False)
            B[r, idx] = rng.normal(0.0, 1.0, idx.size)
    return ScenarioModel(K, p, cfg.nonlinear, tuple(supports), tau, mu, e, b0, B, fixed, random)


@dataclass(frozen=True, eq=False)
class GeneratedTruth:
    """True per-row quantities and the model that produced them."""

    tau_k: np.ndarray
    tau: np.ndarray
    m: np.ndarray
    e: np.ndarray
    p: np.ndarray
    mu0: np.ndarray
    model: TruthModel

    @classmethod
    def evaluate(cls, model, X):
        return cls(model.tau_k(X), model.tau(X), model.m(X), model.propensity(X),
                   model.membership(X), model.mu0(X), model)

    def subset(self, rows):
        return GeneratedTruth(self.tau_k[rows], self.tau[rows], self.m[rows], self.e[rows],
                              self.p[rows], self.mu0[rows], self.model)

    def to_dict(self):
        return {"coefficients": self.model.coefficients(), "tau": self.tau.tolist(),
                "tau_k": self.tau_k.tolist(), "m": self.m.tolist(), "e": self.e.tolist(),
                "p": self.p.tolist(), "mu0": self.mu0.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _rngs(seed, coef_seed):
    data_rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2]))
    root = seed if coef_seed is None else coef_seed
    coef_rng = np.random.default_rng(np.random.SeedSequence([int(root), 1]))
    return coef_rng, data_rng


def _draw_labels(P, rng):
    u = rng.random(P.shape[0])[:, None]
    return 1 + np.sum(u > np.cumsum(P, axis=1)[:, :-1], axis=1)


def gen_scenario(cfg, covariates=None):
    """Draw one dataset for a scenario.

    Covariates are standard Gaussian unless ``covariates`` (a matrix with
    ``cfg.p`` columns) is given, in which case ``cfg.n`` rows are resampled
    from it with replacement. Study labels are redrawn until every study has
    at least ``cfg.min_study_size`` rows.
    """
    coef_rng, rng = _rngs(cfg.seed, cfg.coef_seed)
    model = draw_scenario_model(cfg, coef_rng)
    if covariates is None:
        X = rng.standard_normal((cfg.n, cfg.p))
    else:
        covariates = np.asarray(covariates, dtype=float)
        if covariates.shape[1] != cfg.p:
            raise DataError(f"covariate table has {covariates.shape[1]} columns, expected {cfg.p}")
        X = covariates[rng.integers(0, covariates.shape[0], cfg.n)]
    P = model.membership(X)
    need = min(cfg.min_study_size, cfg.n // cfg.K)
    for _ in range(1000):
        S = _draw_labels(P, rng)
        if np.bincount(S, minlength=cfg.K + 1)[1:].min() >= need:
            break
    else:
        raise DataError(f"could not draw {need} rows for every study")
    E = model.propensity(X)
    A = (rng.random(cfg.n) < E[np.arange(cfg.n), S - 1]).astype(float)
    tau_k = model.tau_k(X)
    Y = np.sum((model.mu0(X) + A[:, None] * tau_k) * P, axis=1) + rng.standard_normal(cfg.n)
    data = MultiStudyDataset(Y, A, X, S, cfg.K)
    return data, GeneratedTruth.evaluate(model, X)


def noise(data, truth):
    """``Y - sum_k {mu_k(X) + A tau_k(X)} p(k|X)`` for each row."""
    fitted = np.sum((truth.mu0 + data.treatments[:, None] * truth.tau_k) * truth.p, axis=1)
    return data.outcomes - fitted


# ---------------------------------------------------------------------------
# Gaussian covariates with study-specific mean shifts


@dataclass(frozen=True, eq=False)
class CovariateLaw:
    """``X | S = k ~ N(means[k], I)`` with ``P(S = k) = weights[k]``."""

    means: np.ndarray
    weights: np.ndarray

    def log_density(self, X):
        X = np.atleast_2d(X)
        d2 = ((X[:, None, :] - self.means[None, :, :]) ** 2).sum(axis=2)
        return -0.5 * d2

    def membership(self, X):
        """Bayes posterior ``p(k | x)``."""
        L = self.log_density(X) + np.log(self.weights)
        return np.exp(L - logsumexp(L, axis=1, keepdims=True))


def synthetic_covariates(n, p, K, shift, seed, *, n_shifted=None):
    """Per-study Gaussian covariates with mean ``+/- shift`` on a few coordinates.

    Returns ``(X, labels, law)``; studies have sizes as equal as possible.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 3]))
    n_shifted = min(p, 5) if n_shifted is None else n_shifted
    means = np.zeros((K, p))
    for k in range(K):
        cols = rng.choice(p, size=n_shifted, replace=False)
        means[k, cols] = shift * rng.choice([-1.0, 1.0], size=n_shifted)
    sizes = np.full(K, n // K)
    sizes[: n % K] += 1
    S = np.repeat(np.arange(1, K + 1), sizes)
    X = rng.standard_normal((n, p)) + means[S - 1]
    return X, S, CovariateLaw(means, sizes / n)


# ---------------------------------------------------------------------------
# binary-outcome experiment

CLINICAL = ("age", "histology", "ER", "PR", "HER2")
GENES = ("SCUBE2", "MMP11", "BCL2", "MYBL2", "CCNB1", "ACTB", "TFRC", "GSTM1")
NAMED = CLINICAL + GENES
N_INERT = 92
STUDY_SIZES = (94, 168)
N_TEST = 30

# Counterfactual log-odds before the 1/50 scaling: intercept, age slope, and
# the slope of each heterogeneous term in the order they carry random effects.
_TERMS = ("ER", "PR", "HER2", "histology") + GENES
_TREATED = (-0.28, -0.087,
            (0.077, -0.34, 0.058, 0.009, 0.025, 0.33, -0.36, 0.38, -0.22, -0.33, -0.21, 0.075))
_CONTROL = (0.062, -0.56,
            (-0.20, 0.14, -0.13, -0.083, -0.12, 0.48, -0.21, -0.13, 0.004, 0.064, 0.056, -0.015))

# Study-specific covariate laws for the synthetic fallback.
_AGE = ((48.0, 10.0), (54.0, 11.0))
_HIST = ((0.25, 0.45, 0.30), (0.15, 0.40, 0.45))
_ER = (0.60, 0.70)
_PR = (0.50, 0.55)
_HER2 = (0.25, 0.0)
_GENE_MEAN = (
    (9.5, 9.0, 8.0, 7.5, 8.5, 12.0, 10.0, 8.0),
    (10.0, 9.6, 8.6, 7.0, 8.0, 11.5, 10.5, 7.4),
)
_GENE_SD = 1.0
_INERT_MEAN = 8.0


@dataclass(frozen=True, eq=False)
class BreastCovariateLaw:
    """Mixed-type study-specific covariate law for the binary experiment.

    Columns: the 13 named features followed by ``n_inert`` genes with a
    common N(8, 1) law in both studies.
    """

    n_inert: int = N_INERT
    weights: tuple = (94 / 262, 168 / 262)

    @property
    def names(self):
        return NAMED + tuple(f"G{j + 1}" for j in range(self.n_inert))

    def sample(self, k, n, rng):
        """``n`` rows from study ``k`` (1 or 2)."""
        i = k - 1
        age = rng.normal(*_AGE[i], size=n)
        hist = 1.0 + rng.choice(3, size=n, p=_HIST[i])
        er = (rng.random(n) < _ER[i]).astype(float)
        pr = (rng.random(n) < _PR[i]).astype(float)
        her2 = (rng.random(n) < _HER2[i]).astype(float)
        genes = rng.normal(np.asarray(_GENE_MEAN[i]), _GENE_SD, size=(n, len(GENES)))
        inert = rng.normal(_INERT_MEAN, 1.0, size=(n, self.n_inert))
        return np.column_stack([age, hist, er, pr, her2, genes, inert])

    def log_density(self, X):
        X = np.atleast_2d(X)
        out = np.empty((X.shape[0], 2))
        with np.errstate(divide="ignore"):
            for i in range(2):
                mu, sd = _AGE[i]
                lp = -0.5 * ((X[:, 0] - mu) / sd) ** 2 - np.log(sd)
                hist = np.clip(X[:, 1].astype(int) - 1, 0, 2)
                lp = lp + np.log(np.asarray(_HIST[i])[hist])
                for col, q in ((2, _ER[i]), (3, _PR[i]), (4, _HER2[i])):
                    lp = lp + np.log(np.where(X[:, col] == 1.0, q, 1.0 - q))
                g = X[:, 5:13] - np.asarray(_GENE_MEAN[i])
                lp = lp - 0.5 * (g ** 2).sum(axis=1) / _GENE_SD ** 2
                out[:, i] = lp
        return out

    def membership(self, X):
        L = self.log_density(X) + np.log(np.asarray(self.weights))
        return np.exp(L - logsumexp(L, axis=1, keepdims=True))


def study2_propensity(X):
    """Treatment probability in the observational study."""
    X = np.atleast_2d(X)
    col = {name: j for j, name in enumerate(NAMED)}
    eta = (0.2 - 0.03 * (X[:, col["age"]] - 50.0) + 0.4 * (X[:, col["histology"]] - 2.0)
           + 0.5 * (X[:, col["MMP11"]] - 9.0) - 0.5 * (X[:, col["BCL2"]] - 8.0))
    return expit(eta)


@dataclass(frozen=True, eq=False)
class BinaryExperimentModel(TruthModel):
    """Study-specific counterfactual success probabilities.

    ``gamma1[k]``/``gamma0[k]`` hold the random effects of study ``k`` on
    the terms in ``terms[k]``; study 2 has no HER2 term.
    """

    gamma1: tuple
    gamma0: tuple
    law: object
    K: int = 2

    @staticmethod
    def terms(k):
        return _TERMS if k == 1 else tuple(t for t in _TERMS if t != "HER2")

    def _logit(self, X, k, base, gamma):
        intercept, age_slope, slopes = base
        col = {name: j for j, name in enumerate(NAMED)}
        eta = intercept + age_slope * X[:, col["age"]]
        fixed = dict(zip(_TERMS, slopes))
        for t, g in zip(self.terms(k), gamma):
            eta = eta + (fixed[t] + g) * X[:, col[t]]
        return eta / 50.0

    def counterfactual(self, X, a):
        """``(n, 2)`` success probabilities under treatment ``a``."""
        X = np.atleast_2d(X)
        base, gammas = (_TREATED, self.gamma1) if a == 1 else (_CONTROL, self.gamma0)
        return np.column_stack([expit(self._logit(X, k, base, gammas[k - 1])) for k in (1, 2)])

    def tau_k(self, X):
        return self.counterfactual(X, 1) - self.counterfactual(X, 0)

    def mu0(self, X):
        return self.counterfactual(X, 0)

    def propensity(self, X):
        X = np.atleast_2d(X)
        return np.column_stack([np.full(X.shape[0], 0.5), study2_propensity(X)])

    def membership(self, X):
        return self.law.membership(X)

    def coefficients(self):
        return {"terms": {str(k): list(self.terms(k)) for k in (1, 2)},
                "gamma_treated": [list(map(float, g)) for g in self.gamma1],
                "gamma_control": [list(map(float, g)) for g in self.gamma0],
                "treated": {"intercept": _TREATED[0], "age": _TREATED[1],
                            "slopes": dict(zip(_TERMS, _TREATED[2]))},
                "control": {"intercept": _CONTROL[0], "age": _CONTROL[1],
                            "slopes": dict(zip(_TERMS, _CONTROL[2]))},
                "scale": 50.0}


@dataclass(frozen=True)
class BinaryExperimentConfig:
    sigma2_tau: float = 0.0
    seed: int = 0
    coef_seed: int | None = None
    n_inert: int = N_INERT

    def basis(self):
        """Per-study bases: intercept and the named features present in that study."""
        cols1 = tuple(Raw(j) for j in range(len(NAMED)))
        her2 = NAMED.index("HER2")
        cols2 = tuple(Raw(j) for j in range(len(NAMED)) if j != her2)
        return BasisSpec((BasisBlock(cols1), BasisBlock(cols2)))


def draw_binary_model(cfg, rng, law=None):
    sd = np.sqrt(cfg.sigma2_tau)
    gammas = []
    for _ in range(2):  # treated, control
        gammas.append(tuple(rng.normal(0.0, sd, len(BinaryExperimentModel.terms(k)))
                            for k in (1, 2)))
    law = law or BreastCovariateLaw(cfg.n_inert)
    return BinaryExperimentModel(gammas[0], gammas[1], law)


def gen_binary_experiment(cfg, covariates=None):
    """One draw of the two-study binary-outcome experiment.

    ``covariates`` may be a pair of matrices (one per study) whose first 13
    columns are the named features; otherwise the synthetic law is sampled.
    With user covariates the true membership is not known, so the truth uses
    the study shares as membership probabilities.
    """
    coef_rng, rng = _rngs(cfg.seed, cfg.coef_seed)
    law = BreastCovariateLaw(cfg.n_inert)
    if covariates is None:
        parts = [law.sample(k, n_k, rng) for k, n_k in zip((1, 2), STUDY_SIZES)]
        names = law.names
    else:
        parts = [np.asarray(c, dtype=float) for c in covariates]
        if len(parts) != 2 or any(c.ndim != 2 or c.shape[1] < len(NAMED) for c in parts):
            raise DataError(f"need two covariate tables with the {len(NAMED)} named features "
                            f"{', '.join(NAMED)} first")
        law = _FlatLaw((parts[0].shape[0], parts[1].shape[0]))
        names = NAMED + tuple(f"G{j + 1}" for j in range(parts[0].shape[1] - len(NAMED)))
    model = draw_binary_model(cfg, coef_rng, law)
    X = np.vstack(parts)
    S = np.repeat([1, 2], [parts[0].shape[0], parts[1].shape[0]])
    E = model.propensity(X)[np.arange(X.shape[0]), S - 1]
    A = (rng.random(X.shape[0]) < E).astype(float)
    p1 = model.counterfactual(X, 1)[np.arange(X.shape[0]), S - 1]
    p0 = model.counterfactual(X, 0)[np.arange(X.shape[0]), S - 1]
    u = rng.random(X.shape[0])
    Y = np.where(A == 1, u < p1, u < p0).astype(float)
    data = MultiStudyDataset(Y, A, X, S, 2, names)
    return data, GeneratedTruth.evaluate(model, X)


@dataclass(frozen=True)
class _FlatLaw:
    sizes: tuple

    def membership(self, X):
        w = np.asarray(self.sizes, dtype=float) / sum(self.sizes)
        return np.tile(w, (np.atleast_2d(X).shape[0], 1))
