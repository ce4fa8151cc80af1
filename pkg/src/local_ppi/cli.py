"""Command-line interface: ``local-ppi <subcommand> [flags]``.

Exit codes: 0 success, 2 input or schema error, 3 singular design, 4 I/O
failure, 1 anything else raised by the package.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import data as data_mod
from .errors import (
    DegenerateResampling,
    InputError,
    LocalPPIError,
    PluginUnavailable,
    SingularDesign,
)
from .estimators import make_fit_fn
from .experiments import ExperimentSpec, dumps, load_schema, run_experiment
from .kernels import KernelSpec, default_bandwidth
from .predictors import (
    FileBackedPredictor,
    KnnPredictor,
    NoisyOraclePredictor,
    predictor_quality,
)
from .uncertainty import bootstrap_covariance, ci_value, plugin_bias_terms, region_gradient

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_INPUT = 2
EXIT_SINGULAR = 3
EXIT_IO = 4


def _jobs_default():
    raw = os.environ.get("LOCAL_PPI_JOBS")
    if raw is None:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _name_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")


# ----------------------------------------------------------------- simulate

def cmd_simulate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = data_mod.SimulationSpec(args.n, args.N, math.sqrt(args.noise_var), args.seed)
    labeled, unlabeled, truth = data_mod.generate(sim)
    names = data_mod.feature_names(labeled.p)
    data_mod.write_dataset(out / "labeled.csv", labeled)
    data_mod.write_dataset(out / "unlabeled.csv", unlabeled, label=None)
    truth_cols = {"m": truth.labeled_m}
    truth_cols.update({f"g{j + 1}": truth.labeled_gradient[:, j] for j in range(labeled.p)})
    data_mod.write_csv(out / "labeled_truth.csv", truth_cols)
    data_mod.write_csv(out / "unlabeled_truth.csv", {"m": truth.unlabeled_m})
    manifest = {
        "schema_version": data_mod.MANIFEST_VERSION,
        "provenance": sim.provenance,
        "features": names,
        "label": "y",
        "labeled": {"data": "labeled.csv"},
        "unlabeled": {"data": "unlabeled.csv"},
        "simulation": {"n": args.n, "N": args.N, "noise_var": args.noise_var,
                       "seed": args.seed},
    }
    if args.n_test:
        test = data_mod.draw_features(args.n_test, args.seed)
        data_mod.write_csv(out / "test.csv", {
            **{name: test[:, j] for j, name in enumerate(names)},
            "y": data_mod.simulate_m(test),
        })
        manifest["test"] = {"data": "test.csv"}
    if args.oracle_noise_sd is not None:
        pred = NoisyOraclePredictor(args.oracle_noise_sd, seed=args.seed)
        data_mod.write_predictions(out / "labeled_predictions.csv",
                                   pred.predict(labeled.features))
        data_mod.write_predictions(out / "unlabeled_predictions.csv",
                                   pred.predict(unlabeled.features))
        manifest["labeled"]["predictions"] = "labeled_predictions.csv"
        manifest["unlabeled"]["predictions"] = "unlabeled_predictions.csv"
        manifest["predictor"] = {"kind": "noisy_oracle", "noise_sd": args.oracle_noise_sd,
                                 "seed": args.seed}
    (out / "manifest.json").write_text(dumps(manifest) + "\n", encoding="utf-8")
    return EXIT_OK


# -------------------------------------------------------------------- infer

def _load(path, features, label, role):
    ds, dropped = data_mod.load_csv(path, features, label, provenance=str(Path(path).resolve()))
    if ds.n == 0:
        raise InputError(f"{role} file {path} has no complete rows")
    return ds, dropped


def _header(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [h.strip() for h in next(csv.reader(fh), [])]


def _feature_columns(args):
    if args.features:
        return args.features
    return [c for c in _header(args.labeled) if c != args.label]


def _attach_predictions(args, labeled, unlabeled):
    """Return datasets with predictions, and the resolved predictor config."""
    if args.predictions:
        lab_path, unl_path = args.predictions
        labeled = FileBackedPredictor(lab_path).attach(labeled)
        if unlabeled is not None:
            unlabeled = FileBackedPredictor(unl_path).attach(unlabeled)
        return labeled, unlabeled, {"kind": "file_backed", "paths": [lab_path, unl_path]}
    if args.predictor == "knn":
        if not args.train:
            raise InputError("--predictor knn needs --train")
        training, _ = _load(args.train, args.features_resolved, args.label, "training")
        pred = KnnPredictor(training, args.k)
        cfg = {"kind": "knn", "k": args.k, "train": args.train}
    elif args.predictor == "noisy-oracle":
        pred = NoisyOraclePredictor(args.oracle_noise_sd, seed=args.seed, oracle=args.oracle)
        cfg = {"kind": "noisy_oracle", "noise_sd": args.oracle_noise_sd, "seed": args.seed,
               "oracle": args.oracle}
    else:
        raise InputError("PPI methods need --predictions or --predictor")
    labeled = pred.attach(labeled)
    if unlabeled is not None:
        unlabeled = pred.attach(unlabeled)
    return labeled, unlabeled, cfg


def _resolve_target(args, labeled, unlabeled):
    if args.target is not None:
        x = np.asarray(args.target, dtype=float)
        if x.shape[0] != labeled.p:
            raise InputError(f"--target has {x.shape[0]} values, data has {labeled.p} features")
        return x
    source = unlabeled if unlabeled is not None else labeled
    if not 0 <= args.target_row < source.n:
        raise InputError(f"--target-row {args.target_row} outside [0, {source.n})")
    return np.array(source.features[args.target_row])


def infer_report(args):
    """Run the inference pipeline and return the report dictionary."""
    method = {"con": "conventional", "ppi": "ppi", "hd": "ppi_hd"}[args.method]
    args.features_resolved = _feature_columns(args)
    warnings = []
    labeled, dropped_l = _load(args.labeled, args.features_resolved, args.label, "labeled")
    unlabeled = None
    dropped_u = 0
    if method != "conventional":
        if not args.unlabeled:
            raise InputError(f"--method {args.method} needs --unlabeled")
        unlabeled, dropped_u = _load(args.unlabeled, args.features_resolved, None, "unlabeled")
    for role, nd in (("labeled", dropped_l), ("unlabeled", dropped_u)):
        if nd:
            warnings.append(f"dropped {nd} {role} rows with missing values")
    pred_cfg = None
    if method != "conventional":
        labeled, unlabeled, pred_cfg = _attach_predictions(args, labeled, unlabeled)
        quality = predictor_quality(labeled.predictions, labeled)
        if quality.advisory:
            warnings.append(quality.advisory)

    p = labeled.p
    kernel = KernelSpec(args.kernel, p)
    h = args.h if args.h is not None else default_bandwidth(labeled.n, p)
    x = _resolve_target(args, labeled, unlabeled)
    fit_fn = make_fit_fn(method, h, kernel, args.t)
    fit = fit_fn(labeled, unlabeled, x)

    config = {
        "labeled": args.labeled,
        "unlabeled": args.unlabeled,
        "features": args.features_resolved,
        "label": args.label,
        "predictor": pred_cfg,
        "method": method,
        "h": h,
        "kernel": kernel.family,
        "alpha": args.alpha,
        "t": args.t,
        "bias_correct": args.bias_correct,
        "bias_formula": args.bias_formula,
        "boot": args.boot,
        "seed": args.seed,
        "target": x,
    }
    rect = fit.rectifier
    report = {
        "schema_version": 1,
        "config": config,
        "warnings": warnings,
        "fit": {
            "method": fit.method,
            "m_hat": fit.m_hat,
            "gradient": fit.grad_hat,
            "target": fit.target,
            "effective_weight_mass": fit.effective_weight_mass,
            "rectifier": None if rect is None else {
                "delta": rect.delta, "n_used": rect.n_used, "t": rect.t,
            },
        },
        "uncertainty": None,
    }
    if args.boot:
        cov = bootstrap_covariance(fit_fn, labeled, unlabeled, x, args.boot, args.seed,
                                   args.jobs)
        bias = None
        if args.bias_correct:
            bias = plugin_bias_terms(labeled, x, h, kernel, args.bias_formula)
        ci = ci_value(fit, cov, args.alpha, bias)
        region = None
        try:
            r = region_gradient(fit, cov, args.alpha, bias)
            region = {"center": r.center, "shape": r.shape, "radius_sq": r.radius_sq,
                      "alpha": r.alpha, "bias_shift": r.bias_shift}
        except InputError as err:
            warnings.append(f"gradient region unavailable: {err}")
        report["uncertainty"] = {
            "method": cov.method,
            "n_boot": cov.n_boot,
            "n_failed": cov.n_failed,
            "covariance": cov.matrix,
            "se_value": cov.se_value,
            "interval": {"lower": ci.lower, "upper": ci.upper, "alpha": ci.alpha,
                         "bias_corrected": ci.bias_corrected, "center": ci.center,
                         "degenerate": ci.degenerate},
            "gradient_region": region,
            "bias": None if bias is None else {
                "b1": bias.b1, "b2": bias.b2, "h": bias.h, "source": bias.source,
                "formula": bias.formula,
            },
        }
    doc = json.loads(dumps(report))
    jsonschema.validate(doc, load_schema("infer_report.schema.json"))
    return doc


def cmd_infer(args):
    _emit(dumps(infer_report(args)) + "\n", args.out)
    return EXIT_OK


# --------------------------------------------------------------- experiment

def cmd_experiment(args):
    spec = ExperimentSpec.from_json(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    result = run_experiment(spec, jobs=args.jobs)
    out = result.write(args.out)
    if not args.quiet:
        for row in result.rows:
            sys.stderr.write(
                f"n={row['n']} N={row['N']} {row['method']}: se={row['standard_error']:.4g} "
                f"decay={row['se_decay_pct']:.1f}% coverage={row['coverage']:.3f} "
                f"debiased={row['debiased_coverage']:.3f}\n"
            )
        sys.stderr.write(f"results written to {out}\n")
    return EXIT_OK


# ---------------------------------------------------------------------- pca

def cmd_pca(args):
    ds, dropped = data_mod.load_csv(args.input, args.features, None)
    model = data_mod.pca_fit(ds.features, args.k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    names = args.features or _header(args.input)
    doc = {
        "schema_version": 1,
        "input": args.input,
        "features": names,
        "k": args.k,
        "dropped_rows": dropped,
        "mean": model.mean,
        "components": model.components,
        "explained_variance": model.explained_variance,
        "explained_variance_ratio": model.explained_variance_ratio,
    }
    (out / "pca.json").write_text(dumps(doc) + "\n", encoding="utf-8")
    scores = data_mod.pca_transform(model, ds.features)
    data_mod.write_csv(out / "scores.csv",
                       {f"pc{j + 1}": scores[:, j] for j in range(args.k)})
    return EXIT_OK


# ---------------------------------------------------------- predict-quality

def cmd_predict_quality(args):
    ref, _ = data_mod.load_csv(args.reference, args.features, args.label,
                               provenance=str(Path(args.reference).resolve()))
    if args.predictions:
        pred = FileBackedPredictor(args.predictions)
        cfg = {"kind": "file_backed", "path": args.predictions}
    elif args.predictor == "knn":
        if not args.train:
            raise InputError("--predictor knn needs --train")
        train, _ = data_mod.load_csv(args.train, args.features, args.label,
                                     provenance=str(Path(args.train).resolve()))
        pred = KnnPredictor(train, args.k)
        pred.check_independent(ref)
        cfg = {"kind": "knn", "k": args.k, "train": args.train}
    else:
        pred = NoisyOraclePredictor(args.oracle_noise_sd, seed=args.seed, oracle=args.oracle)
        cfg = {"kind": "noisy_oracle", "noise_sd": args.oracle_noise_sd, "seed": args.seed,
               "oracle": args.oracle}
    q = predictor_quality(pred, ref)
    doc = {
        "schema_version": 1,
        "reference": args.reference,
        "predictor": cfg,
        "n": q.n,
        "mse_vs_labels": q.mse_vs_labels,
        "ratio_to_label_second_moment": q.ratio_to_label_second_moment,
        "advisory": q.advisory,
    }
    _emit(dumps(doc) + "\n", args.out)
    return EXIT_OK


# ------------------------------------------------------------------- parser

def _add_predictor_flags(p, with_file=True):
    if with_file:
        g = p.add_mutually_exclusive_group()
        g.add_argument("--predictions", nargs=2, metavar=("LABELED", "UNLABELED"),
                       help="prediction files aligned with the labeled and unlabeled rows")
        g.add_argument("--predictor", choices=["knn", "noisy-oracle"])
    p.add_argument("--train", help="labeled training CSV for --predictor knn")
    p.add_argument("--k", type=int, default=5, help="neighbours for --predictor knn")
    p.add_argument("--oracle-noise-sd", type=float, default=math.sqrt(0.1))
    p.add_argument("--oracle", choices=["simulation", "zero"], default="simulation")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="local-ppi",
        description="Local linear prediction-powered inference.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="write a simulated dataset bundle")
    s.add_argument("--n", type=int, required=True, help="labeled rows")
    s.add_argument("--N", type=int, required=True, help="unlabeled rows")
    s.add_argument("--noise-var", type=float, default=data_mod.DEFAULT_NOISE_VAR)
    s.add_argument("--n-test", type=int, default=0, help="noise-free test rows to add")
    s.add_argument("--oracle-noise-sd", type=float, default=None,
                   help="also write noisy-oracle prediction files")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    i = sub.add_parser("infer", help="estimate m(x) and its gradient at one target")
    i.add_argument("--labeled", required=True)
    i.add_argument("--unlabeled")
    i.add_argument("--features", type=_name_list, help="comma-separated feature columns")
    i.add_argument("--label", default="y")
    _add_predictor_flags(i)
    tg = i.add_mutually_exclusive_group(required=True)
    tg.add_argument("--target", type=_float_list, help="comma-separated target point")
    tg.add_argument("--target-row", type=int, help="row index of the unlabeled file")
    i.add_argument("--h", type=float, default=None, help="bandwidth (default n^(-1/(p+4)))")
    i.add_argument("--kernel", default="gaussian")
    i.add_argument("--alpha", type=float, default=0.05)
    i.add_argument("--method", choices=["con", "ppi", "hd"], default="ppi")
    i.add_argument("--t", type=float, default=None, help="regularization for --method hd")
    i.add_argument("--bias-correct", action="store_true")
    i.add_argument("--bias-formula", choices=["half", "theorem"], default="half")
    i.add_argument("--boot", type=int, default=200, help="bootstrap replicates (0 skips)")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--jobs", type=int, default=_jobs_default())
    i.add_argument("--out", help="report path (default stdout)")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("experiment", help="run a JSON experiment spec")
    e.add_argument("--spec", required=True)
    e.add_argument("--out", required=True, help="result directory")
    e.add_argument("--seed", type=int, default=None, help="override the spec's seed")
    e.add_argument("--jobs", type=int, default=_jobs_default())
    e.add_argument("--quiet", action="store_true")
    e.set_defaults(func=cmd_experiment)

    c = sub.add_parser("pca", help="principal components of a CSV")
    c.add_argument("--input", required=True)
    c.add_argument("--features", type=_name_list)
    c.add_argument("--k", type=int, required=True)
    c.add_argument("--out", required=True, help="output directory")
    c.set_defaults(func=cmd_pca)

    q = sub.add_parser("predict-quality", help="predictor error against labels")
    q.add_argument("--reference", required=True, help="labeled CSV")
    q.add_argument("--features", type=_name_list)
    q.add_argument("--label", default="y")
    g = q.add_mutually_exclusive_group()
    g.add_argument("--predictions", help="prediction file aligned with the reference rows")
    g.add_argument("--predictor", choices=["knn", "noisy-oracle"], default="noisy-oracle")
    _add_predictor_flags(q, with_file=False)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--out", help="report path (default stdout)")
    q.set_defaults(func=cmd_predict_quality)
    return parser


def exit_code(err):
    """Map an exception to the CLI exit code contract."""
    if isinstance(err, (SingularDesign, DegenerateResampling, PluginUnavailable)):
        return EXIT_SINGULAR
    if isinstance(err, (InputError, jsonschema.ValidationError)):
        return EXIT_INPUT
    if isinstance(err, OSError):
        return EXIT_IO
    return EXIT_ERROR


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (LocalPPIError, OSError, jsonschema.ValidationError) as err:
        where = f" ({err.filename})" if isinstance(err, OSError) and err.filename else ""
        sys.stderr.write(f"local-ppi {args.command}: error: {err}{where}\n")
        return exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
