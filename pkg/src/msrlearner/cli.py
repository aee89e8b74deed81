"""Command-line entry point: simulate, fit, predict, experiment, report."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from msrlearner.crossfit import NuisanceConfig, assign_folds, fit_nuisances
from msrlearner.dataset import BasisSpec, DataError, linear_basis, load_csv, read_schema, \
    spline_basis, write_csv
from msrlearner.estimator import EstimationError, Penalty, TreatmentEffectModel, \
    build_design, cv_lambda_tau, fit
from msrlearner.experiments import TREND_COLUMNS, SUMMARY_COLUMNS, ConfigError, \
    ExperimentConfig, read_archive, run_experiment, summarize, trends
from msrlearner.experiments import write_csv as write_rows
from msrlearner.inference import SandwichComponents, ci_tau, sandwich
from msrlearner.learners import LearnerError
from msrlearner.simulation import BinaryExperimentConfig, ScenarioConfig, \
    gen_binary_experiment, gen_scenario

log = logging.getLogger("msrlearner")

EXIT_OK, EXIT_CONFIG, EXIT_FAILURES = 0, 1, 2


def _simulate(args):
    if args.binary:
        cfg = BinaryExperimentConfig(args.sigma2, args.seed)
    else:
        cfg = ScenarioConfig(args.scenario, args.K, args.n, args.p, args.sigma2, args.p_o,
                             args.n_active, args.membership, seed=args.seed)
    data, truth = (gen_binary_experiment if args.binary else gen_scenario)(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(data, out / "data.csv", out / "schema.json")
    (out / "truth.json").write_text(truth.to_json())
    (out / "basis.json").write_text(json.dumps(cfg.basis().to_dict(), sort_keys=True))
    print(f"wrote {data.n} rows (K={data.K}, p={data.p}) to {out}")
    return EXIT_OK


def _basis(args, data):
    if args.basis_file:
        spec = BasisSpec.from_dict(json.loads(Path(args.basis_file).read_text()))
        if spec.K != data.K:
            raise DataError(f"basis file has {spec.K} blocks for K={data.K}")
        return spec
    if args.basis == "spline":
        return spline_basis(data.K, data.p, args.spline_column)
    return linear_basis(data.K, data.p)


def _fit(args):
    data = load_csv(args.data, args.schema)
    basis = _basis(args, data)
    folds = assign_folds(data, args.folds, args.seed)
    nuis = fit_nuisances(data, folds, NuisanceConfig(tune=args.tune))
    design = build_design(data, nuis, basis)
    if args.lambda_tau == "cv":
        lam = cv_lambda_tau(design, np.geomspace(1e-6, 1.0, 13), args.folds, args.seed)
    else:
        lam = float(args.lambda_tau)
    model = fit(design, Penalty(lam), nuis.membership_full)
    comp = sandwich(design, model)
    payload = model.to_dict()
    payload["inference"] = {"omega": comp.Omega.tolist(), "n": comp.n,
                            "condition_number": comp.condition_number}
    payload["covariates"] = list(data.covariate_names)
    payload["relabel_map"] = {str(k): v for k, v in data.relabel_map.items()}
    Path(args.out).write_text(json.dumps(payload, sort_keys=True))
    for w in nuis.notes:
        log.warning(w)
    print(f"fitted K={data.K}, d={basis.d}, lambda_tau={lam:g}; model written to {args.out}")
    return EXIT_OK


def _read_covariates(path, names):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in names if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        rows = []
        for i, row in enumerate(reader, start=1):
            try:
                rows.append([float(row[c]) for c in names])
            except ValueError:
                raise DataError(f"{path}: non-numeric covariate, row {i}") from None
    return np.asarray(rows, dtype=float).reshape(-1, len(names))


def _predict(args):
    payload = json.loads(Path(args.model).read_text())
    model = TreatmentEffectModel.from_dict(payload)
    names = payload.get("covariates")
    if args.schema:
        names = read_schema(args.schema)["covariates"]
    X = _read_covariates(args.covariates, names)
    tau = np.atleast_1d(model.predict_tau(X))
    blocks = model.predict_tau_blocks(X)
    P = model.membership_proba(X)
    header = ["id", "tau_hat"] + [f"tau_{k}" for k in range(1, model.K + 1)] \
        + [f"p_{k}" for k in range(1, model.K + 1)]
    inf = payload.get("inference")
    ci = None
    if inf is not None:
        omega = np.asarray(inf["omega"])
        comp = SandwichComponents(None, None, omega, int(inf["n"]), inf["condition_number"])
        ci = ci_tau(model, comp, X, args.level)
        header += ["se", "lo", "hi"]
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(header)
        for i in range(X.shape[0]):
            row = [i + 1, repr(float(tau[i]))] + [repr(float(v)) for v in blocks[i]] \
                + [repr(float(v)) for v in P[i]]
            if ci is not None:
                row += [repr(float(ci.se[i])), repr(float(ci.lo[i])), repr(float(ci.hi[i]))]
            w.writerow(row)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _experiment(args):
    cfg = ExperimentConfig.from_json(args.config)
    if args.replicates is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "replicates": args.replicates})

    def progress(done, total):
        if done == total or done % max(1, total // 20) == 0:
            log.info("%d/%d replicates", done, total)

    archive = run_experiment(cfg, args.out, progress=progress)
    frac = archive.failure_fraction
    print(f"archive written to {archive.path} ({len(archive.records)} records, "
          f"failure fraction {frac:.3f})")
    if frac > cfg.failure_threshold:
        log.error("failure fraction %.3f exceeds threshold %.3f", frac, cfg.failure_threshold)
        return EXIT_FAILURES
    return EXIT_OK


def _report(args):
    archive = read_archive(args.archive)
    rows = summarize(archive)
    text = write_rows(rows, SUMMARY_COLUMNS, args.out)
    if args.out is None:
        sys.stdout.write(text)
    if args.trends:
        write_rows(trends(rows), TREND_COLUMNS, args.trends)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="msrlearner", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a simulated dataset, schema and truth")
    p.add_argument("--scenario", default="A", choices=["A", "B", "C", "D"])
    p.add_argument("--binary", action="store_true", help="binary-outcome two-study design")
    p.add_argument("--K", type=int, default=4)
    p.add_argument("--n", type=int, default=400)
    p.add_argument("--p", type=int, default=40)
    p.add_argument("--sigma2", type=float, default=0.0)
    p.add_argument("--p-o", dest="p_o", type=float, default=1.0)
    p.add_argument("--n-active", dest="n_active", type=int, default=8,
                   help="covariates with nonzero effects in each study")
    p.add_argument("--membership", default="preset", choices=["preset", "random"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_simulate)

    p = sub.add_parser("fit", help="fit the multi-study R-learner to a CSV dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--basis", default="linear", choices=["linear", "spline"])
    p.add_argument("--basis-file", help="JSON basis specification")
    p.add_argument("--spline-column", type=int, default=0)
    p.add_argument("--lambda-tau", default="1e-6", help="ridge strength or 'cv'")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--tune", default="per_fold", choices=["per_fold", "global"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model JSON path")
    p.set_defaults(func=_fit)

    p = sub.add_parser("predict", help="predict effects (and intervals) for new covariates")
    p.add_argument("--model", required=True)
    p.add_argument("--covariates", required=True, help="CSV with the training covariate names")
    p.add_argument("--schema", help="schema naming the covariate columns")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", help="output CSV (default stdout)")
    p.set_defaults(func=_predict)

    p = sub.add_parser("experiment", help="run a replicate sweep from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--replicates", type=int, help="override the replicate count")
    p.set_defaults(func=_experiment)

    p = sub.add_parser("report", help="summarize an experiment archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--out", help="summary CSV (default stdout)")
    p.add_argument("--trends", help="also write Spearman trends to this CSV")
    p.set_defaults(func=_report)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, LearnerError, EstimationError, FileNotFoundError,
            KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
