"""Replicate sweeps, scoring and summaries.

An experiment is a grid over ``sigma2_tau`` and ``p_o`` (and nuisance
modes); each grid cell is replicated ``replicates`` times. Replicate ``r`` of
cell ``c`` draws its data from the seed sequence ``[root_seed, c, r]``, so
every estimator and every mode sees the same dataset.

The archive is a JSON-lines file: one header line with the configuration,
then one line per (cell, mode, replicate). Wall-clock times go to a separate
file so that the archive itself is reproducible byte for byte.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from msrlearner.crossfit import NuisanceConfig, assign_folds, fit_nuisances, oracle_nuisances
from msrlearner.dataset import DataError, split
from msrlearner.estimator import (
    DEFAULT_LAMBDA_TAU,
    Penalty,
    bounded_transform,
    build_design,
    cv_lambda_tau,
    fit,
)
from msrlearner.learners import (
    ElasticNet,
    FixedPropensity,
    MembershipWeightedOLS,
    Multinomial,
)
from msrlearner.simulation import (
    N_TEST,
    SIGMA2_GRID,
    BinaryExperimentConfig,
    ScenarioConfig,
    gen_binary_experiment,
    gen_scenario,
)

log = logging.getLogger(__name__)

ESTIMATORS = ("multistudy", "pooled_rlearner", "perstudy_rlearner")
MODES = ("oracle", "plugin")
BASELINE = "pooled_rlearner"
WORKERS_ENV = "MSRL_WORKERS"
SUMMARY_COLUMNS = ("scenario", "sigma2_tau", "p_o", "mode", "estimator_pair",
                   "mean_log2_ratio", "ci_lo", "ci_hi", "n_ok", "flag")
TREND_COLUMNS = ("scenario", "p_o", "mode", "estimator_pair", "spearman", "n_levels")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


# ---------------------------------------------------------------------------
# metrics


def mse(truth, predictions):
    """Mean squared difference between true and predicted effects."""
    truth = np.asarray(truth, dtype=float).ravel()
    predictions = np.asarray(predictions, dtype=float).ravel()
    if truth.shape != predictions.shape:
        raise ValueError(f"length mismatch: {truth.size} truths, {predictions.size} predictions")
    return float(np.mean((truth - predictions) ** 2))


def log2_mse_ratio(mse_a, mse_b):
    """``log2(mse_a / mse_b)``; negative values favour ``a``."""
    if mse_b == 0:
        raise ZeroDivisionError("reference MSE is zero")
    return math.log2(mse_a / mse_b)


# ---------------------------------------------------------------------------
# configuration


def learner_from_config(spec):
    """Build a nuisance learner from a JSON-style dict (or a list of them)."""
    if isinstance(spec, list):
        return tuple(learner_from_config(s) for s in spec)
    if not isinstance(spec, dict) or "type" not in spec:
        raise ConfigError(f"learner spec needs a 'type': {spec!r}")
    kw = {k: v for k, v in spec.items() if k != "type"}
    kind = spec["type"]
    try:
        if kind == "elastic_net":
            return ElasticNet(**kw)
        if kind == "fixed":
            return FixedPropensity(**kw)
        if kind == "multinomial":
            if "lambdas" in kw:
                kw["lambdas"] = tuple(kw["lambdas"])
            return Multinomial(**kw)
        if kind == "membership_weighted_ols":
            return MembershipWeightedOLS(**kw)
    except TypeError as exc:
        raise ConfigError(f"bad options for learner {kind!r}: {exc}") from None
    raise ConfigError(f"unknown learner type {kind!r}")


def _learner_to_config(learner):
    if isinstance(learner, tuple):
        return [_learner_to_config(x) for x in learner]
    kind = {ElasticNet: "elastic_net", FixedPropensity: "fixed", Multinomial: "multinomial",
            MembershipWeightedOLS: "membership_weighted_ols"}[type(learner)]
    d = {k: v for k, v in asdict(learner).items() if k != "needs_groups"}
    if "lambdas" in d:
        d["lambdas"] = [float(x) for x in d["lambdas"]]
    return {"type": kind, **d}


def default_nuisance_config(kind):
    """Learners for the scenario designs (elastic net) or the binary experiment (lasso)."""
    # logistic paths near separation are slow, so they stop two decades below lambda_max
    if kind == "binary":
        lasso = ElasticNet("gaussian", alpha_mix=1.0)
        logistic = ElasticNet("binomial", 1.0, n_lambda=30, lambda_min_ratio=1e-2)
        return NuisanceConfig(outcome=lasso, propensity=(FixedPropensity(0.5), logistic),
                              membership=Multinomial(), tune="global")
    return NuisanceConfig(
        outcome=ElasticNet("gaussian"),
        propensity=ElasticNet("binomial", n_lambda=30, lambda_min_ratio=1e-2),
        membership=Multinomial(1.0), tune="global")


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep over ``sigma2_grid x p_o_grid x modes``."""

    kind: str = "scenario"
    scenario: str = "A"
    K: int = 4
    n: int = 400
    p: int = 40
    n_active: int = 8
    membership: str = "preset"
    sigma2_grid: tuple = SIGMA2_GRID
    p_o_grid: tuple = (1.0,)
    modes: tuple = ("plugin",)
    estimators: tuple = ("multistudy", "pooled_rlearner")
    replicates: int = 500
    split_fraction: float = 0.7
    folds: int = 5
    root_seed: int = 0
    fix_coefficients: bool = False
    lambda_tau: object = "cv"
    lambda_tau_grid: tuple = tuple(float(x) for x in np.geomspace(1e-6, 1.0, 13))
    nuisance: NuisanceConfig | None = None
    pooled_propensity: object = None
    bounded: bool | None = None
    store_pairs: bool = True
    failure_threshold: float = 0.1

    def __post_init__(self):
        if self.kind not in ("scenario", "binary"):
            raise ConfigError(f"kind must be 'scenario' or 'binary', got {self.kind!r}")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        for name in ("sigma2_grid", "p_o_grid", "modes", "estimators"):
            value = tuple(getattr(self, name))
            if not value:
                raise ConfigError(f"{name} must be nonempty")
            object.__setattr__(self, name, value)
        bad = set(self.modes) - set(MODES)
        if bad:
            raise ConfigError(f"unknown mode(s) {sorted(bad)}")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad:
            raise ConfigError(f"unknown estimator(s) {sorted(bad)}")
        if not (self.lambda_tau == "cv" or (isinstance(self.lambda_tau, (int, float))
                                            and self.lambda_tau >= 0)):
            raise ConfigError(f"lambda_tau must be 'cv' or a nonnegative number")
        if self.nuisance is None:
            object.__setattr__(self, "nuisance", default_nuisance_config(self.kind))
        if self.pooled_propensity is None:
            prop = self.nuisance.propensity
            pooled = prop[-1] if isinstance(prop, tuple) else prop
            object.__setattr__(self, "pooled_propensity", pooled)
        if self.bounded is None:
            object.__setattr__(self, "bounded", self.kind == "binary")
        for s2, po in self.cells():
            self._cell_config(s2, po, 0)  # validate each grid cell up front

    @property
    def label(self):
        return "binary" if self.kind == "binary" else self.scenario

    def cells(self):
        return list(itertools.product(self.sigma2_grid, self.p_o_grid))

    def _cell_config(self, sigma2, p_o, seed, coef_seed=None):
        try:
            if self.kind == "binary":
                return BinaryExperimentConfig(sigma2, seed, coef_seed)
            return ScenarioConfig(self.scenario, self.K, self.n, self.p, sigma2, p_o,
                                  self.n_active, self.membership, coef_seed=coef_seed, seed=seed)
        except DataError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self):
        d = {f: getattr(self, f) for f in self.__dataclass_fields__ if f != "nuisance"}
        for k in ("sigma2_grid", "p_o_grid", "modes", "estimators", "lambda_tau_grid"):
            d[k] = list(d[k])
        d["pooled_propensity"] = _learner_to_config(self.pooled_propensity)
        nu = self.nuisance
        d["nuisance"] = {"outcome": _learner_to_config(nu.outcome),
                         "propensity": _learner_to_config(nu.propensity),
                         "membership": _learner_to_config(nu.membership),
                         "clip": nu.clip, "tune": nu.tune}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
        kind = d.get("kind", "scenario")
        if "nuisance" in d and d["nuisance"] is not None:
            nu = dict(d["nuisance"])
            base = default_nuisance_config(kind)
            extra = set(nu) - {"outcome", "propensity", "membership", "clip", "tune"}
            if extra:
                raise ConfigError(f"unknown nuisance key(s): {sorted(extra)}")
            d["nuisance"] = NuisanceConfig(
                learner_from_config(nu["outcome"]) if "outcome" in nu else base.outcome,
                learner_from_config(nu["propensity"]) if "propensity" in nu else base.propensity,
                learner_from_config(nu["membership"]) if "membership" in nu else base.membership,
                nu.get("clip", base.clip), nu.get("tune", base.tune))
        if d.get("pooled_propensity") is not None:
            d["pooled_propensity"] = learner_from_config(d["pooled_propensity"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None


def replicate_seed(root, cell, rep):
    """Seed of replicate ``rep`` in grid cell ``cell``."""
    return int(np.random.SeedSequence([int(root), int(cell), int(rep)]).generate_state(1)[0])


def coefficient_seed(root, cell):
    return int(np.random.SeedSequence([int(root), int(cell), 2**31]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# one replicate


def _penalty(cfg, design, seed):
    if cfg.lambda_tau == "cv":
        return Penalty(cv_lambda_tau(design, cfg.lambda_tau_grid, cfg.folds, seed))
    return Penalty(float(cfg.lambda_tau))


def _pooled_oracle(truth, pooled):
    """True nuisances for the merged data: ``e(x) = sum_k p(k|x) e_k(x)``."""
    model = truth.model

    def e(X):
        return np.sum(model.membership(X) * model.propensity(X), axis=1)

    return oracle_nuisances(pooled, model.m, e, None)


def _fit_estimators(cfg, train, truth, mode, basis, seed):
    """Fitted models keyed by estimator name, plus failures and warnings."""
    models, failures, notes = {}, {}, []
    nuis = pooled_nuis = None
    pooled = train.pooled()
    try:
        if mode == "oracle":
            nuis = truth.model.oracle(train)
            pooled_nuis = _pooled_oracle(truth, pooled)
        else:
            folds = assign_folds(train, cfg.folds, seed)
            nuis = fit_nuisances(train, folds, cfg.nuisance)
            pooled_cfg = replace(cfg.nuisance, propensity=cfg.pooled_propensity)
            pooled_nuis = fit_nuisances(pooled, assign_folds(pooled, cfg.folds, seed),
                                        pooled_cfg, reuse_outcome=nuis)
            notes.extend(nuis.notes + pooled_nuis.notes)
    except Exception as exc:  # recorded per estimator below
        for name in cfg.estimators:
            failures[name] = f"nuisance: {type(exc).__name__}: {exc}"
        return models, failures, notes
    clip = 0.0 if mode == "oracle" else cfg.nuisance.clip
    for name in cfg.estimators:
        try:
            if name == "pooled_rlearner":
                design = build_design(pooled, pooled_nuis, basis.pooled())
                memb = None
            else:
                n_ = nuis if name == "multistudy" else nuis.with_memberships(train.one_hot())
                design = build_design(train, n_, basis)
                memb = nuis.membership_full
            models[name] = fit(design, _penalty(cfg, design, seed), memb, clip=clip)
        except Exception as exc:
            failures[name] = f"{type(exc).__name__}: {exc}"
    return models, failures, notes


def run_replicate(cfg, cell, rep):
    """All modes of replicate ``rep`` in cell ``cell``; returns (records, seconds)."""
    sigma2, p_o = cfg.cells()[cell]
    seed = replicate_seed(cfg.root_seed, cell, rep)
    coef_seed = coefficient_seed(cfg.root_seed, cell) if cfg.fix_coefficients else None
    start = time.perf_counter()
    gen_cfg = cfg._cell_config(sigma2, p_o, seed, coef_seed)
    base = {"scenario": cfg.label, "sigma2_tau": sigma2, "p_o": p_o, "cell": cell,
            "replicate": rep, "seed": seed}
    try:
        if cfg.kind == "binary":
            data, truth = gen_binary_experiment(gen_cfg)
            plan = split(data, (data.n - N_TEST) / data.n, stratify=False, seed=seed)
        else:
            data, truth = gen_scenario(gen_cfg)
            plan = split(data, cfg.split_fraction, stratify=True, seed=seed)
    except Exception as exc:
        msg = f"generate: {type(exc).__name__}: {exc}"
        records = [{**base, "mode": mode, "mse": {}, "failures": {e: msg for e in cfg.estimators},
                    "warnings": [], "condition_numbers": {}, "n_test": 0} for mode in cfg.modes]
        return records, time.perf_counter() - start
    basis = gen_cfg.basis()
    train = data.subset(plan.train)
    X_test = data.covariates[plan.test]
    tau_test = truth.tau[plan.test]
    records = []
    for mode in cfg.modes:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            models, failures, notes = _fit_estimators(cfg, train, truth, mode, basis, seed)
        rec = {**base, "mode": mode, "mse": {}, "failures": failures,
               "warnings": sorted(set(notes) | {str(w.message) for w in caught}),
               "condition_numbers": {}, "n_test": int(plan.test.size)}
        if cfg.store_pairs:
            rec["pairs"] = {}
        for name, model in models.items():
            try:
                pred = model.predict_tau(X_test)
                if cfg.bounded:
                    pred = bounded_transform(pred)
                if not np.all(np.isfinite(pred)):
                    raise FloatingPointError("non-finite predictions")
            except Exception as exc:
                failures[name] = f"predict: {type(exc).__name__}: {exc}"
                continue
            rec["mse"][name] = mse(tau_test, pred)
            rec["condition_numbers"][name] = model.condition_number
            if cfg.store_pairs:
                rec["pairs"][name] = [[float(a), float(b)] for a, b in zip(tau_test, pred)]
        records.append(rec)
    return records, time.perf_counter() - start


def _task(args):
    cfg, cell, rep = args
    return run_replicate(cfg, cell, rep)


# ---------------------------------------------------------------------------
# sweep and archive


@dataclass
class Archive:
    config: dict
    records: list
    path: Path | None = None

    @property
    def failure_fraction(self):
        total = failed = 0
        for r in self.records:
            for name in self.config["estimators"]:
                total += 1
                failed += name in r["failures"]
        return failed / total if total else 0.0

    def dumps(self):
        lines = [json.dumps({"type": "config", "config": self.config}, sort_keys=True)]
        lines += [json.dumps({"type": "replicate", **r}, sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"


def read_archive(path):
    config, records = None, []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("type")
            if kind == "config":
                config = obj["config"]
            else:
                records.append(obj)
    if config is None:
        raise ConfigError(f"{path}: archive has no config header")
    return Archive(config, records, Path(path))


def worker_count():
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def run_experiment(cfg, output_dir=None, *, workers=None, progress=None):
    """Run every (cell, replicate); write ``archive.jsonl`` and ``timings.jsonl``."""
    workers = worker_count() if workers is None else workers
    tasks = [(cfg, c, r) for c in range(len(cfg.cells())) for r in range(cfg.replicates)]
    archive = Archive(cfg.to_dict(), [])
    timings = []
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = pool.map(_task, tasks, chunksize=max(1, len(tasks) // (8 * workers)))
            for (_, c, r), (records, secs) in zip(tasks, results):
                archive.records.extend(records)
                timings.append({"cell": c, "replicate": r, "seconds": secs})
                if progress:
                    progress(len(timings), len(tasks))
    else:
        for task in tasks:
            records, secs = _task(task)
            archive.records.extend(records)
            timings.append({"cell": task[1], "replicate": task[2], "seconds": secs})
            if progress:
                progress(len(timings), len(tasks))
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        archive.path = out / "archive.jsonl"
        archive.path.write_text(archive.dumps())
        (out / "timings.jsonl").write_text(
            "".join(json.dumps(t, sort_keys=True) + "\n" for t in timings))
    return archive


# ---------------------------------------------------------------------------
# summaries


def mean_ci(values, z=1.96):
    """Mean and normal-approximation interval ``mean +/- z sd / sqrt(n)``."""
    v = np.asarray(values, dtype=float)
    m = float(v.mean())
    half = z * float(v.std()) / math.sqrt(v.size)
    return m, m - half, m + half


def summarize(archive, baseline=BASELINE):
    """Per cell and estimator pair: mean log2 MSE ratio with a 95% interval."""
    groups = {}
    for r in archive.records:
        key = (r["scenario"], r["sigma2_tau"], r["p_o"], r["mode"])
        groups.setdefault(key, []).append(r)
    rows = []
    others = [e for e in archive.config["estimators"] if e != baseline]
    for key in sorted(groups):
        recs = sorted(groups[key], key=lambda r: r["replicate"])
        for name in others:
            ratios = []
            for r in recs:
                a, b = r["mse"].get(name), r["mse"].get(baseline)
                if a is None or b is None or b == 0:
                    continue
                ratios.append(log2_mse_ratio(a, b))
            row = dict(zip(SUMMARY_COLUMNS[:4], key))
            row["estimator_pair"] = f"{name}/{baseline}"
            row["n_ok"] = len(ratios)
            if len(ratios) >= 2:
                row["mean_log2_ratio"], row["ci_lo"], row["ci_hi"] = mean_ci(sorted(ratios))
                row["flag"] = ""
            else:
                row["mean_log2_ratio"] = float(np.mean(ratios)) if ratios else float("nan")
                row["ci_lo"] = row["ci_hi"] = float("nan")
                row["flag"] = "insufficient replicates"
            rows.append(row)
    return rows


def trends(rows):
    """Spearman correlation of the mean ratio against ``sigma2_tau``."""
    groups = {}
    for row in rows:
        key = (row["scenario"], row["p_o"], row["mode"], row["estimator_pair"])
        groups.setdefault(key, []).append(row)
    out = []
    for key in sorted(groups):
        g = sorted(groups[key], key=lambda r: r["sigma2_tau"])
        x = [r["sigma2_tau"] for r in g]
        y = [r["mean_log2_ratio"] for r in g]
        rho = float(spearmanr(x, y).statistic) if len(g) >= 2 else float("nan")
        out.append(dict(zip(TREND_COLUMNS, (*key, rho, len(g)))))
    return out


def write_csv(rows, columns, path=None):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({c: row[c] for c in columns})
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()
