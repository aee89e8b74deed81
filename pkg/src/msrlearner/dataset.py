"""Multi-study data container, CSV ingestion, basis expansion and splitting."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or inconsistent multi-study input."""


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class MultiStudyDataset:
    """Stacked ``(Y, X, A, S)`` records from K studies.

    Study labels are stored as integers ``1..K``. ``relabel_map`` maps the
    labels found in the source data to these contiguous labels.
    """

    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    study_labels: np.ndarray
    K: int
    covariate_names: tuple[str, ...] = ()
    relabel_map: dict = field(default_factory=dict)

    def __post_init__(self):
        y = _frozen(self.outcomes, float).ravel()
        a = _frozen(self.treatments, float).ravel()
        X = _frozen(self.covariates, float)
        s = _frozen(self.study_labels, int).ravel()
        if X.ndim == 1:
            X = _frozen(X.reshape(-1, 1), float)
        n = y.shape[0]
        if not (a.shape[0] == n and X.shape[0] == n and s.shape[0] == n):
            raise DataError(
                f"column lengths differ: Y={n}, A={a.shape[0]}, X={X.shape[0]}, S={s.shape[0]}")
        if n == 0:
            raise DataError("empty dataset")
        if self.K < 1:
            raise DataError(f"K must be positive, got {self.K}")
        bad = np.flatnonzero((a != 0) & (a != 1))
        if bad.size:
            raise DataError(f"non-binary treatment, row {bad[0] + 1}")
        bad = np.flatnonzero((s < 1) | (s > self.K))
        if bad.size:
            raise DataError(f"study label {s[bad[0]]} outside 1..{self.K}, row {bad[0] + 1}")
        counts = np.bincount(s, minlength=self.K + 1)[1:]
        if np.any(counts == 0):
            raise DataError(f"empty study {int(np.flatnonzero(counts == 0)[0]) + 1}")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(X))):
            raise DataError("non-finite outcome or covariate values")
        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise DataError(f"{len(names)} covariate names for {X.shape[1]} columns")
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "treatments", a)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "study_labels", s)
        object.__setattr__(self, "covariate_names", names)
        if not self.relabel_map:
            object.__setattr__(self, "relabel_map", {k: k for k in range(1, self.K + 1)})

    @property
    def n(self):
        return self.outcomes.shape[0]

    @property
    def p(self):
        return self.covariates.shape[1]

    @cached_property
    def per_study_index(self):
        return tuple(np.flatnonzero(self.study_labels == k) for k in range(1, self.K + 1))

    @property
    def study_sizes(self):
        return np.array([idx.size for idx in self.per_study_index])

    def subset(self, rows):
        rows = np.asarray(rows, dtype=int)
        return MultiStudyDataset(self.outcomes[rows], self.treatments[rows],
                                 self.covariates[rows], self.study_labels[rows], self.K,
                                 self.covariate_names, dict(self.relabel_map))

    def pooled(self):
        """The same rows treated as a single study."""
        return MultiStudyDataset(self.outcomes, self.treatments, self.covariates,
                                 np.ones(self.n, dtype=int), 1, self.covariate_names)

    def relabeled(self, perm):
        """Relabel studies: rows in study ``k`` move to study ``perm[k-1]``."""
        perm = np.asarray(perm, dtype=int)
        if sorted(perm.tolist()) != list(range(1, self.K + 1)):
            raise DataError(f"not a permutation of 1..{self.K}: {perm.tolist()}")
        return MultiStudyDataset(self.outcomes, self.treatments, self.covariates,
                                 perm[self.study_labels - 1], self.K, self.covariate_names)

    def one_hot(self):
        P = np.zeros((self.n, self.K))
        P[np.arange(self.n), self.study_labels - 1] = 1.0
        return P


# ---------------------------------------------------------------------------
# CSV ingestion


REQUIRED_SCHEMA_KEYS = ("outcome", "treatment", "study", "covariates")


def read_schema(schema):
    if isinstance(schema, (str, Path)):
        schema = json.loads(Path(schema).read_text())
    missing = [k for k in REQUIRED_SCHEMA_KEYS if k not in schema]
    if missing:
        raise DataError(f"schema is missing keys {missing}")
    return schema


def _parse_float(cell, what, row):
    try:
        v = float(cell)
    except ValueError:
        raise DataError(f"non-numeric {what} {cell!r}, row {row}") from None
    if not np.isfinite(v):
        raise DataError(f"non-finite {what}, row {row}")
    return v


def load_csv(path, schema):
    """Read a multi-study CSV described by a column-name schema.

    ``schema`` is a dict (or a path to a JSON file) with keys ``outcome``,
    ``treatment``, ``study`` and ``covariates``. Study labels may be any
    integers; they are relabeled to ``1..K`` in increasing order. Row numbers
    in error messages count data rows from 1.
    """
    schema = read_schema(schema)
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        wanted = [schema["outcome"], schema["treatment"], schema["study"], *schema["covariates"]]
        absent = [c for c in wanted if c not in header]
        if absent:
            raise DataError(f"missing column(s) {absent}")
        ys, As, ss, Xs = [], [], [], []
        for row, rec in enumerate(reader, start=1):
            ys.append(_parse_float(rec[schema["outcome"]], "outcome", row))
            a = _parse_float(rec[schema["treatment"]], "treatment", row)
            if a not in (0.0, 1.0):
                raise DataError(f"non-binary treatment, row {row}")
            As.append(a)
            sv = _parse_float(rec[schema["study"]], "study label", row)
            if sv != int(sv):
                raise DataError(f"non-integer study label {rec[schema['study']]!r}, row {row}")
            ss.append(int(sv))
            Xs.append([_parse_float(rec[c], f"covariate {c}", row) for c in schema["covariates"]])
    if not ys:
        raise DataError("no data rows")
    original = sorted(set(ss))
    relabel = {lab: k for k, lab in enumerate(original, start=1)}
    s = np.array([relabel[v] for v in ss])
    X = np.array(Xs, dtype=float).reshape(len(ys), len(schema["covariates"]))
    return MultiStudyDataset(np.array(ys), np.array(As), X, s, len(original),
                             tuple(schema["covariates"]), relabel)


def write_csv(data, path, schema_path=None, *, outcome="y", treatment="a", study="s"):
    """Write ``data`` as CSV (original study labels) plus an optional schema."""
    inverse = {v: k for k, v in data.relabel_map.items()}
    names = list(data.covariate_names)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([outcome, treatment, study, *names])
        for i in range(data.n):
            w.writerow([repr(float(data.outcomes[i])), int(data.treatments[i]),
                        inverse[int(data.study_labels[i])],
                        *(repr(float(v)) for v in data.covariates[i])])
    schema = {"outcome": outcome, "treatment": treatment, "study": study, "covariates": names}
    if schema_path is not None:
        Path(schema_path).write_text(json.dumps(schema, indent=2))
    return schema


# ---------------------------------------------------------------------------
# basis functions


@dataclass(frozen=True)
class Raw:
    """Covariate ``j`` as is."""

    j: int

    @property
    def dim(self):
        return 1

    def evaluate(self, X):
        return X[:, [self.j]]


@dataclass(frozen=True)
class Poly:
    """Powers ``x_j, x_j^2, ..., x_j^degree``."""

    j: int
    degree: int

    def __post_init__(self):
        if self.degree < 1:
            raise DataError(f"polynomial degree must be >= 1, got {self.degree}")

    @property
    def dim(self):
        return self.degree

    def evaluate(self, X):
        x = X[:, [self.j]]
        return x ** np.arange(1, self.degree + 1)


@dataclass(frozen=True)
class CubicSpline:
    """Truncated-power cubic spline ``x, x^2, x^3, (x - l)^3_+`` per knot ``l``."""

    j: int
    knots: tuple[float, ...] = (0.0,)

    def __post_init__(self):
        knots = tuple(float(k) for k in self.knots)
        if len(set(knots)) != len(knots):
            raise DataError(f"duplicate spline knots {knots}")
        object.__setattr__(self, "knots", tuple(sorted(knots)))

    @property
    def dim(self):
        return 3 + len(self.knots)

    def evaluate(self, X):
        x = X[:, [self.j]]
        trunc = np.maximum(x - np.asarray(self.knots), 0.0) ** 3
        return np.hstack([x, x**2, x**3, trunc])


_TERM_TYPES = {"raw": Raw, "poly": Poly, "spline": CubicSpline}


def _term_to_dict(t):
    if isinstance(t, Raw):
        return {"type": "raw", "j": t.j}
    if isinstance(t, Poly):
        return {"type": "poly", "j": t.j, "degree": t.degree}
    return {"type": "spline", "j": t.j, "knots": list(t.knots)}


def _term_from_dict(d):
    d = dict(d)
    cls = _TERM_TYPES[d.pop("type")]
    if cls is CubicSpline:
        d["knots"] = tuple(d["knots"])
    return cls(**d)


@dataclass(frozen=True)
class BasisBlock:
    terms: tuple = ()
    intercept: bool = True

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        if self.dim < 1:
            raise DataError("a basis block needs an intercept or at least one term")

    @property
    def dim(self):
        return int(self.intercept) + sum(t.dim for t in self.terms)

    @property
    def max_index(self):
        return max((t.j for t in self.terms), default=-1)

    def evaluate(self, X):
        parts = [np.ones((X.shape[0], 1))] if self.intercept else []
        parts += [t.evaluate(X) for t in self.terms]
        return np.hstack(parts)


@dataclass(frozen=True)
class BasisSpec:
    """Per-study basis functions ``v_k``; blocks are concatenated in study order."""

    blocks: tuple

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise DataError("basis needs at least one block")

    @classmethod
    def identical(cls, block, K):
        return cls((block,) * K)

    @property
    def K(self):
        return len(self.blocks)

    @property
    def dims(self):
        return tuple(b.dim for b in self.blocks)

    @property
    def d(self):
        return sum(self.dims)

    @property
    def slices(self):
        out, start = [], 0
        for dk in self.dims:
            out.append(slice(start, start + dk))
            start += dk
        return tuple(out)

    @property
    def intercept_mask(self):
        mask = np.zeros(self.d, dtype=bool)
        for b, sl in zip(self.blocks, self.slices):
            if b.intercept:
                mask[sl.start] = True
        return mask

    def _check(self, X):
        need = max(b.max_index for b in self.blocks)
        if need >= X.shape[1]:
            raise DataError(f"basis references covariate {need} but x has {X.shape[1]} entries")

    def expand_block(self, X, k):
        """``v_k(X)`` for study ``k`` in 1..K, shape ``(n, d_k)``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        self._check(X)
        return self.blocks[k - 1].evaluate(X)

    def expand(self, X):
        """Blocked ``v(x) = (v_1(x), ..., v_K(x))``; a vector input gives a vector."""
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X2 = np.atleast_2d(X)
        self._check(X2)
        V = np.hstack([b.evaluate(X2) for b in self.blocks])
        return V[0] if single else V

    def pooled(self):
        return BasisSpec((self.blocks[0],))

    def permuted(self, perm):
        """Blocks reordered so that old study ``k`` becomes study ``perm[k-1]``."""
        new = [None] * self.K
        for k, target in enumerate(perm):
            new[target - 1] = self.blocks[k]
        return BasisSpec(tuple(new))

    def to_dict(self):
        return {"blocks": [{"intercept": b.intercept, "terms": [_term_to_dict(t) for t in b.terms]}
                           for b in self.blocks]}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(BasisBlock(tuple(_term_from_dict(t) for t in b["terms"]), b["intercept"])
                         for b in d["blocks"]))


def expand_basis(spec, x):
    return spec.expand(x)


def linear_basis(K, p, columns=None):
    """Intercept plus raw covariates, identical across studies."""
    cols = range(p) if columns is None else columns
    return BasisSpec.identical(BasisBlock(tuple(Raw(j) for j in cols)), K)


def spline_basis(K, p, j=0, knots=(0.0,)):
    """Intercept, a cubic spline in covariate ``j`` and the other covariates raw."""
    terms = (CubicSpline(j, tuple(knots)),) + tuple(Raw(i) for i in range(p) if i != j)
    return BasisSpec.identical(BasisBlock(terms), K)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitPlan:
    train: np.ndarray
    test: np.ndarray
    fraction: float
    stratify: bool
    seed: int


def _n_train(n, fraction, strict):
    m = int(np.floor(fraction * n + 0.5))
    if strict:
        m = min(max(m, 1), n - 1)
    return m


def split(data, fraction=0.7, stratify=True, seed=0):
    """Random train/test split, optionally within each study."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    if stratify:
        train = []
        for k, idx in enumerate(data.per_study_index, start=1):
            if idx.size < 2:
                raise DataError(f"study {k} has {idx.size} row(s); too small to stratify")
            m = _n_train(idx.size, fraction, True)
            train.append(rng.permutation(idx)[:m])
        train = np.sort(np.concatenate(train))
    else:
        if data.n < 2:
            raise DataError("need at least 2 rows to split")
        m = _n_train(data.n, fraction, True)
        train = np.sort(rng.permutation(data.n)[:m])
    test = np.setdiff1d(np.arange(data.n), train)
    return SplitPlan(train, test, fraction, stratify, seed)
