"""`spt-sae` command line interface."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import bootstrap, io, predict, simstudy
from .fit import FitError, FitOptions, fit_mm
from .model import ModelError, ModelSpec, OverflowGuardError, PanelData
from .spatial import SpatialError, build_knn_proximity, build_seven_diagonal, sar_covariance

USAGE_ERROR, DATA_ERROR, NUMERIC_ERROR = 2, 3, 4

MODEL_NAMES = {"st1": "ST1", "st1_1": "ST1_1", "t1": "T1", "t1_2": "T1_2",
               "s1": "S1", "m1": "M1", "m0": "M0"}
PREDICTORS = ("ebp-approx", "ebp-exact", "plugin", "synthetic")


def _threads(args) -> int:
    env = os.environ.get("SPT_SAE_THREADS")
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            raise UsageError(f"SPT_SAE_THREADS must be an integer, got {env!r}")
    else:
        n = args.threads if args.threads is not None else (os.cpu_count() or 1)
    if n < 1:
        raise UsageError("thread count must be >= 1")
    return n


class UsageError(ValueError):
    pass


def validate_panel(data: PanelData) -> list:
    """Report-only structural checks; PanelData construction enforces them too."""
    report = []
    if (data.nu < 1.0).any():
        report.append("population sizes below 1")
    x = data.x.reshape(-1, data.n_covariates)
    if np.linalg.matrix_rank(x) < data.n_covariates:
        report.append("covariate design is rank deficient")
    if not np.allclose(data.y, np.round(data.y)):
        report.append("counts are not integers")
    return report


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spt-sae",
        description="Spatio-temporal Poisson mixed models for small area estimation")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (env SPT_SAE_THREADS overrides)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_data_args(p):
        p.add_argument("--data", required=True)
        p.add_argument("--proximity", required=True,
                       help="edge list file, or distance matrix if .csv")

    p_fit = sub.add_parser("fit", help="fit a model by the method of moments")
    add_data_args(p_fit)
    p_fit.add_argument("--model", choices=sorted(MODEL_NAMES), default="st1")
    p_fit.add_argument("--option", choices=("opt1", "opt2"), default="opt2")
    p_fit.add_argument("--tol", type=float, default=1e-8)
    p_fit.add_argument("--max-iter", type=int, default=100)
    p_fit.add_argument("--seed", type=int, required=True)
    p_fit.add_argument("--out", required=True)

    p_pred = sub.add_parser("predict", help="predict domain-time proportions")
    add_data_args(p_pred)
    p_pred.add_argument("--fit", required=True, help="fit.json from the fit command")
    p_pred.add_argument("--predictor", choices=PREDICTORS, default="ebp-approx")
    p_pred.add_argument("--s1", type=int, default=500)
    p_pred.add_argument("--s2", type=int, default=700)
    p_pred.add_argument("--seed", type=int, required=True)
    p_pred.add_argument("--out", required=True)

    p_test = sub.add_parser("test", help="bootstrap significance test")
    add_data_args(p_test)
    p_test.add_argument("--null", choices=("phi1", "rho", "phi2"), required=True)
    p_test.add_argument("--b", type=int, default=99)
    p_test.add_argument("--option", choices=("opt1", "opt2"), default="opt2")
    p_test.add_argument("--seed", type=int, required=True)
    p_test.add_argument("--out", required=True)

    p_mse = sub.add_parser("mse", help="parametric-bootstrap MSE of a predictor")
    add_data_args(p_mse)
    p_mse.add_argument("--fit", required=True)
    p_mse.add_argument("--predictor", choices=PREDICTORS, default="ebp-approx")
    p_mse.add_argument("--s1", type=int, default=500)
    p_mse.add_argument("--s2", type=int, default=700)
    p_mse.add_argument("--b", type=int, default=500)
    p_mse.add_argument("--option", choices=("opt1", "opt2"), default="opt2")
    p_mse.add_argument("--seed", type=int, required=True)
    p_mse.add_argument("--out", required=True)

    p_sim = sub.add_parser("simulate", help="run a simulation experiment")
    p_sim.add_argument("--study", choices=("sim1", "sim2"), required=True)
    p_sim.add_argument("--d", type=int, default=100)
    p_sim.add_argument("--t", type=int, default=4)
    p_sim.add_argument("--rho", type=float, default=0.3)
    p_sim.add_argument("--k", type=int, default=200)
    p_sim.add_argument("--s1", type=int, default=500)
    p_sim.add_argument("--s2", type=int, default=700)
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--out", required=True)

    p_prox = sub.add_parser("proximity", help="build and export a proximity matrix")
    src = p_prox.add_mutually_exclusive_group(required=True)
    src.add_argument("--adjacency", help="edge list file")
    src.add_argument("--distance", help="distance matrix CSV")
    src.add_argument("--seven-diagonal", type=int, metavar="D",
                     help="banded matrix with lag weights 5, 2, 1")
    p_prox.add_argument("--knn", type=int, default=None,
                        help="reduce a distance matrix to k nearest neighbours")
    p_prox.add_argument("--out", required=True)
    return parser


def _load_inputs(args):
    data = io.read_panel_csv(args.data)
    w = io.read_proximity(args.proximity)
    if w.n_domains != data.n_domains:
        raise io.DataFormatError(
            f"{args.proximity}: proximity matrix has {w.n_domains} domains but "
            f"{args.data} has {data.n_domains}")
    report = validate_panel(data)
    if report:
        raise io.DataFormatError(f"{args.data}: " + "; ".join(report))
    return data, w


def _predictor_p(kind, theta, data, w, cfg):
    cov = sar_covariance(w, theta.rho)
    if kind == "synthetic":
        return predict.synthetic_p(theta, data)
    if kind == "ebp-exact":
        return predict.ebp_exact_p(theta, data, cov, cfg)
    if kind == "ebp-approx":
        return predict.ebp_approx_p(theta, data, cov, cfg)
    p_hat, v1_hat, v2_hat = predict.ebp_all_approx(theta, data, cov, cfg)
    return predict.plug_in_p(theta, data, v1_hat, v2_hat)


def _cmd_fit(args) -> int:
    data, w = _load_inputs(args)
    opts = FitOptions(option=args.option, tol=args.tol, max_iter=args.max_iter,
                      moran_mc=predict.McConfig(s1=100, s2=100, seed=args.seed))
    fit = fit_mm(data, w, ModelSpec(MODEL_NAMES[args.model]), opts)
    io.write_fit_json(args.out, fit)
    return 0


def _cmd_predict(args) -> int:
    data, w = _load_inputs(args)
    theta, _ = io.theta_from_fit_json(args.fit)
    cfg = predict.McConfig(s1=args.s1, s2=args.s2, seed=args.seed)
    pred = _predictor_p(args.predictor, theta, data, w, cfg)
    io.write_predictions_csv(args.out, data, pred)
    return 0


def _cmd_test(args) -> int:
    data, w = _load_inputs(args)
    rng = np.random.default_rng(args.seed)
    opts = FitOptions(option=args.option,
                      moran_mc=predict.McConfig(s1=100, s2=100, seed=args.seed))
    runner = {"phi1": bootstrap.test_phi1, "rho": bootstrap.test_rho,
              "phi2": bootstrap.test_phi2}[args.null]
    result = runner(data, w, args.b, rng, opts=opts, n_jobs=_threads(args))
    import json

    with open(args.out, "w") as fh:
        json.dump({"null": args.null,
                   "null_model": result.null_model.variant,
                   "alt_model": result.alt_model.variant,
                   "statistic": result.statistic_observed,
                   "p_value": result.p_value,
                   "b": result.b, "failures": result.failures}, fh, indent=2)
        fh.write("\n")
    return 0


def _cmd_mse(args) -> int:
    data, w = _load_inputs(args)
    theta, model = io.theta_from_fit_json(args.fit)
    opts = FitOptions(option=args.option,
                      moran_mc=predict.McConfig(s1=100, s2=100, seed=args.seed))
    fit = fit_mm(data, w, ModelSpec(model), opts, seed=theta)
    cfg = predict.McConfig(s1=args.s1, s2=args.s2, seed=args.seed)
    est = bootstrap.bootstrap_mse(fit, data, w, kind=args.predictor, b=args.b, cfg=cfg,
                                  rng=np.random.default_rng(args.seed),
                                  n_jobs=_threads(args))
    pred = _predictor_p(args.predictor, fit.theta_hat, data, w, cfg)
    io.write_predictions_csv(args.out, data, pred,
                             extra={"mse": est.mse, "rrmse": est.rrmse})
    return 0


def _cmd_simulate(args) -> int:
    scenario = simstudy.SimScenario(d=args.d, t=args.t, rho=args.rho,
                                    k=args.k, seed=args.seed)
    w = build_seven_diagonal(args.d)
    if args.study == "sim1":
        table = simstudy.run_sim1(scenario, w, n_jobs=_threads(args))
    else:
        table = simstudy.run_sim2(scenario, w,
                                  mc=predict.McConfig(s1=args.s1, s2=args.s2),
                                  n_jobs=_threads(args))
    table.to_csv(args.out)
    return 0


def _cmd_proximity(args) -> int:
    if args.seven_diagonal is not None:
        if args.knn is not None:
            raise UsageError("--knn applies only to --distance inputs")
        w = build_seven_diagonal(args.seven_diagonal)
    elif args.adjacency is not None:
        if args.knn is not None:
            raise UsageError("--knn applies only to --distance inputs")
        w = io.read_adjacency(args.adjacency)
    else:
        w = io.read_distance_csv(args.distance)
        if args.knn is not None:
            import csv

            with open(args.distance, newline="") as fh:
                rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
            dist = np.array([[float(c) for c in row[1:]] for row in rows[1:]])
            w = build_knn_proximity(dist, args.knn, labels=w.labels)
    io.write_proximity_csv(args.out, w)
    return 0


_DISPATCH = {"fit": _cmd_fit, "predict": _cmd_predict, "test": _cmd_test,
             "mse": _cmd_mse, "simulate": _cmd_simulate, "proximity": _cmd_proximity}


def parse_and_dispatch(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE_ERROR if exc.code not in (0, None) else 0
    try:
        return _DISPATCH[args.command](args)
    except UsageError as exc:
        print(f"spt-sae: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (io.DataFormatError, ModelError, SpatialError, FileNotFoundError) as exc:
        print(f"spt-sae: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (FitError, OverflowGuardError, predict.PredictionError,
            bootstrap.BootstrapError, np.linalg.LinAlgError) as exc:
        print(f"spt-sae: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


def main() -> None:
    sys.exit(parse_and_dispatch())


if __name__ == "__main__":
    main()
