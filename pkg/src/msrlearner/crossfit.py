"""Fold construction and cross-fitted nuisance estimation.

Three nuisance families are estimated:

* ``m(x) = E[Y | X = x]`` by a pooled regression, out-of-fold over the
  global folds ``q(i)``;
* ``e_k(x) = P(A = 1 | X = x, S = k)`` by a separate regression in each
  study, out-of-fold over the within-study folds ``q_k(i)``;
* ``p(k | x) = P(S = k | X = x)`` by a pooled multi-class model, out-of-fold
  over the global folds.

Rows outside study ``k`` never enter the study-``k`` propensity fits, so
their ``e_k`` predictions come from the model trained on all of study ``k``.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Sequence

import numpy as np

from msrlearner.dataset import DataError
from msrlearner.learners import (
    EPS_CLIP,
    ConstantModel,
    ElasticNet,
    FixedPropensity,
    LearnerError,
    Multinomial,
    clip_probabilities,
    clip_simplex,
    model_from_dict,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FoldAssignment:
    n_folds: int
    global_fold: np.ndarray
    study_fold: np.ndarray
    seed: int


def assign_folds(data, n_folds=5, seed=0):
    """Random even folds over all rows and, separately, within each study.

    Both assignments come from one random ordering of the rows: global folds
    cycle through that ordering, within-study folds cycle through each
    study's rows in the same order. Study labels therefore do not influence
    the assignment.
    """
    sizes = data.study_sizes
    if not 2 <= n_folds <= sizes.min():
        raise DataError(f"fold count {n_folds} outside [2, {int(sizes.min())}] "
                        f"(smallest study has {int(sizes.min())} rows)")
    order = np.random.default_rng(seed).permutation(data.n)
    global_fold = np.empty(data.n, dtype=int)
    global_fold[order] = np.arange(data.n) % n_folds
    study_fold = np.empty(data.n, dtype=int)
    seen = np.zeros(data.K + 1, dtype=int)
    for i in order:
        k = data.study_labels[i]
        study_fold[i] = seen[k] % n_folds
        seen[k] += 1
    return FoldAssignment(n_folds, global_fold, study_fold, seed)


@dataclass(frozen=True)
class NuisanceConfig:
    """Learners for the three nuisance families.

    ``propensity`` may be a single learner used for every study or a
    sequence with one learner per study. ``tune="global"`` selects each
    learner's penalty once on all rows it may see and reuses it in every
    fold; ``"per_fold"`` repeats the cross-validation inside each fold.
    """

    outcome: Any = field(default_factory=lambda: ElasticNet("gaussian"))
    propensity: Any = field(default_factory=lambda: ElasticNet("binomial"))
    membership: Any = field(default_factory=Multinomial)
    clip: float = EPS_CLIP
    tune: str = "per_fold"

    def propensity_for(self, k):
        if isinstance(self.propensity, (list, tuple)):
            return self.propensity[k - 1]
        return self.propensity


@dataclass(frozen=True, eq=False)
class NuisanceEstimates:
    """Per-row nuisance values used in the R-loss.

    ``e_hat`` and ``p_hat`` have one column per study. ``provenance`` is
    ``"crossfit"`` or ``"oracle"``.
    """

    m_hat: np.ndarray
    e_hat: np.ndarray
    p_hat: np.ndarray
    provenance: str
    folds: FoldAssignment | None = None
    outcome_models: tuple = ()
    propensity_models: tuple = ()
    membership_models: tuple = ()
    propensity_full: tuple = ()
    membership_full: Any = None
    notes: tuple = ()

    @property
    def K(self):
        return self.e_hat.shape[1]

    def with_memberships(self, P, provenance=None):
        return replace(self, p_hat=np.asarray(P, dtype=float),
                       provenance=provenance or self.provenance)

    def subset(self, rows):
        return replace(self, m_hat=self.m_hat[rows], e_hat=self.e_hat[rows],
                       p_hat=self.p_hat[rows], folds=None)

    def to_dict(self):
        def dump(models):
            return [m.to_dict() if hasattr(m, "to_dict") else None for m in models]

        out = {
            "provenance": self.provenance,
            "m_hat": self.m_hat.tolist(),
            "e_hat": self.e_hat.tolist(),
            "p_hat": self.p_hat.tolist(),
            "notes": list(self.notes),
        }
        if self.folds is not None:
            out["folds"] = {"n_folds": self.folds.n_folds, "seed": self.folds.seed,
                            "global": self.folds.global_fold.tolist(),
                            "study": self.folds.study_fold.tolist()}
        out["outcome_models"] = dump(self.outcome_models)
        out["propensity_models"] = [dump(ms) for ms in self.propensity_models]
        out["membership_models"] = dump(self.membership_models)
        out["propensity_full"] = dump(self.propensity_full)
        if self.membership_full is not None and hasattr(self.membership_full, "to_dict"):
            out["membership_full"] = self.membership_full.to_dict()
        return out

    @classmethod
    def from_dict(cls, d):
        folds = None
        if "folds" in d:
            f = d["folds"]
            folds = FoldAssignment(f["n_folds"], np.asarray(f["global"]),
                                   np.asarray(f["study"]), f["seed"])

        def load(ms):
            return tuple(model_from_dict(m) for m in ms if m is not None)

        mf = d.get("membership_full")
        return cls(np.asarray(d["m_hat"], dtype=float), np.asarray(d["e_hat"], dtype=float),
                   np.asarray(d["p_hat"], dtype=float), d["provenance"], folds,
                   load(d.get("outcome_models", [])),
                   tuple(load(ms) for ms in d.get("propensity_models", [])),
                   load(d.get("membership_models", [])),
                   load(d.get("propensity_full", [])),
                   model_from_dict(mf) if mf else None, tuple(d.get("notes", [])))

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _seed(root, *key):
    return int(np.random.SeedSequence([int(root), *key]).generate_state(1)[0])


_ROLE = {"outcome": 1, "propensity": 2, "membership": 3}


def _tuned(learner, X, y, seed):
    """Fix ``learner``'s penalty by CV on (X, y) when it would otherwise tune per fit."""
    if isinstance(learner, ElasticNet) and learner.lam is None:
        model = learner.fit(X, y, seed=seed)
        return replace(learner, lam=model.lam), model
    return learner, None


def _fit_outcome(learner, X, y, groups, K, seed):
    if getattr(learner, "needs_groups", False):
        return learner.fit(X, y, groups, K, seed=seed)
    return learner.fit(X, y, seed=seed)


def fit_nuisances(data, folds, config=None, *, reuse_outcome=None):
    """Cross-fitted ``m``, ``e_1..e_K`` and ``p(.|x)`` for every row.

    ``reuse_outcome`` may hold estimates computed earlier on the same rows
    with the same global folds; their outcome predictions are then copied
    instead of refit.
    """
    config = config or NuisanceConfig()
    if config.tune not in ("per_fold", "global"):
        raise ValueError(f"unknown tuning mode {config.tune!r}")
    X, y, a, s = data.covariates, data.outcomes, data.treatments, data.study_labels
    n, K, Q = data.n, data.K, folds.n_folds
    root = folds.seed
    notes = []

    # outcome regression, pooled over studies
    if reuse_outcome is not None:
        m_hat = reuse_outcome.m_hat.copy()
        outcome_models = reuse_outcome.outcome_models
    else:
        learner = config.outcome
        if config.tune == "global":
            learner, _ = _tuned(learner, X, y, _seed(root, _ROLE["outcome"], 0, 99))
        m_hat = np.empty(n)
        outcome_models = []
        for q in range(Q):
            tr, te = folds.global_fold != q, folds.global_fold == q
            model = _fit_outcome(learner, X[tr], y[tr], s[tr], K,
                                 _seed(root, _ROLE["outcome"], 0, q))
            m_hat[te] = model.predict(X[te])
            outcome_models.append(model)
        outcome_models = tuple(outcome_models)

    # study-specific propensities
    e_hat = np.empty((n, K))
    propensity_models, propensity_full = [], []
    for k in range(1, K + 1):
        idx = data.per_study_index[k - 1]
        learner = config.propensity_for(k)
        ak = a[idx]
        if not isinstance(learner, FixedPropensity) and ak.min() == ak.max():
            raise LearnerError(f"study {k} has a single treatment arm")
        if config.tune == "global":
            learner, full = _tuned(learner, X[idx], ak, _seed(root, _ROLE["propensity"], k, 99))
        else:
            full = None
        if full is None:
            full = learner.fit(X[idx], ak, seed=_seed(root, _ROLE["propensity"], k, 99))
        outside = s != k
        e_hat[outside, k - 1] = full.predict(X[outside])
        models = []
        for q in range(Q):
            tr = idx[folds.study_fold[idx] != q]
            te = idx[folds.study_fold[idx] == q]
            a_tr = a[tr]
            if not isinstance(learner, FixedPropensity) and a_tr.min() == a_tr.max():
                msg = (f"study {k}, fold {q + 1}: training rows have a single treatment arm; "
                       f"using the constant propensity {a_tr[0]:g} (clipped)")
                warnings.warn(msg)
                notes.append(msg)
                model = ConstantModel(float(a_tr[0]))
            else:
                model = learner.fit(X[tr], a_tr, seed=_seed(root, _ROLE["propensity"], k, q))
            e_hat[te, k - 1] = model.predict(X[te])
            models.append(model)
        propensity_models.append(tuple(models))
        propensity_full.append(full)
    e_hat = clip_probabilities(e_hat, config.clip)

    # membership probabilities, pooled
    if K == 1:
        p_hat = np.ones((n, 1))
        membership_models = ()
        membership_full = None
    else:
        mlearner = config.membership
        membership_full = None
        if config.tune == "global" and isinstance(mlearner, Multinomial) and mlearner.lam is None:
            membership_full = mlearner.fit(X, s, K, seed=_seed(root, _ROLE["membership"], 0, 99))
            mlearner = replace(mlearner, lam=membership_full.lam)
        p_hat = np.empty((n, K))
        membership_models = []
        for q in range(Q):
            tr, te = folds.global_fold != q, folds.global_fold == q
            model = mlearner.fit(X[tr], s[tr], K, seed=_seed(root, _ROLE["membership"], 0, q))
            p_hat[te] = model.predict_proba(X[te])
            membership_models.append(model)
        membership_models = tuple(membership_models)
        if membership_full is None:
            membership_full = mlearner.fit(X, s, K, seed=_seed(root, _ROLE["membership"], 0, 99))
        p_hat = clip_simplex(p_hat, config.clip)

    return NuisanceEstimates(m_hat, e_hat, p_hat, "crossfit", folds, outcome_models,
                             tuple(propensity_models), membership_models,
                             tuple(propensity_full), membership_full, tuple(notes))


def _evaluate(f, X):
    if callable(f):
        return np.asarray(f(X), dtype=float).reshape(X.shape[0], -1)
    return np.full((X.shape[0], 1), float(f))


@dataclass(frozen=True)
class OracleMembership:
    """Wraps a known membership function so it can stand in for a fitted model."""

    fn: Callable

    def predict_proba(self, X):
        return np.asarray(self.fn(np.atleast_2d(X)), dtype=float)


def oracle_nuisances(data, m, e, p):
    """Nuisance values from known functions; nothing is fitted or clipped.

    ``m`` maps an ``(n, p)`` covariate matrix to ``n`` values; ``e`` is a list
    of K callables or constants; ``p`` maps covariates to an ``(n, K)``
    membership matrix (ignored when K = 1).
    """
    X = data.covariates
    m_hat = _evaluate(m, X)[:, 0]
    if not isinstance(e, Sequence):
        e = [e] * data.K
    if len(e) != data.K:
        raise DataError(f"{len(e)} propensity functions for K={data.K}")
    e_hat = np.hstack([_evaluate(f, X)[:, :1] for f in e])
    if data.K == 1:
        p_hat = np.ones((data.n, 1))
        memb = None
    else:
        p_hat = _evaluate(p, X)
        if p_hat.shape[1] != data.K:
            raise DataError(f"membership function returned {p_hat.shape[1]} columns, "
                            f"expected {data.K}")
        memb = OracleMembership(p)
    return NuisanceEstimates(m_hat, e_hat, p_hat, "oracle", membership_full=memb)
