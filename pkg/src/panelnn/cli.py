"""Command-line entry point: ``panelnn {fit,predict,simulate,mc}``.

Exit codes: 0 success, 1 runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from panelnn.errors import PanelNNError
from panelnn.inference import infer, parametric_ci, prediction_arrays
from panelnn.model_io import load_model, save_model
from panelnn.network import Activation, Architecture
from panelnn.panel_data import CsvSchema, read_columns, save_csv, split_by_codes, temporal_split
from panelnn.simulation import (
    DGPConfig,
    format_float,
    generate_panel,
    run_monte_carlo,
    summary_table,
    write_rep_csv,
)
from panelnn.training import FitConfig, lambda_path, read_key_values

log = logging.getLogger("panelnn")

PAPER_LAYERS = "12,11,10,9"


def _names(text: str | None) -> tuple[str, ...]:
    return tuple(s.strip() for s in text.split(",") if s.strip()) if text else ()


def _layers(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in _names(text))
    except ValueError:
        raise argparse.ArgumentTypeError(f"layer sizes must be integers, got {text!r}") from None


def _key_value(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _fit_config(args) -> FitConfig:
    overrides = read_key_values(args.config) if args.config else {}
    overrides.update(dict(args.set or []))
    if args.lambda_init is not None:
        overrides["lambda_init"] = str(args.lambda_init)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return FitConfig().with_overrides(overrides)


def _activation(args) -> Activation:
    return Activation(args.activation, args.slope)


def _add_model_flags(p, seed=True):
    p.add_argument("--layers", type=_layers, default=_layers(PAPER_LAYERS),
                   help="hidden layer sizes bottom to top (default %(default)s); empty for a linear model")
    p.add_argument("--activation", default="leaky_relu", choices=["leaky_relu", "relu", "tanh", "sigmoid"])
    p.add_argument("--slope", type=float, default=0.01, help="leaky ReLU slope for negative inputs")
    p.add_argument("--config", help="key=value file with FitConfig fields")
    p.add_argument("--set", type=_key_value, action="append", metavar="KEY=VALUE", help="override a FitConfig field")
    p.add_argument("--lambda-init", type=float, default=None, help="first penalty on the path (default 8)")
    if seed:
        p.add_argument("--seed", type=int, default=None)


def _add_dgp_flags(p):
    d = DGPConfig()
    p.add_argument("--n-i", type=int, default=d.n_i, help="number of units")
    p.add_argument("--n-t", type=int, default=d.n_t, help="number of periods")
    p.add_argument("--noise-sd", type=float, default=d.noise_sd)
    p.add_argument("--mean-scale", type=float, default=d.mean_scale)
    p.add_argument("--cov-scale", type=float, default=d.cov_scale)
    p.add_argument("--fe-link", type=float, default=d.fe_link)
    p.add_argument("--seed", type=int, default=0)


def _dgp(args) -> DGPConfig:
    return DGPConfig(n_i=args.n_i, n_t=args.n_t, noise_sd=args.noise_sd, mean_scale=args.mean_scale,
                     cov_scale=args.cov_scale, fe_link=args.fe_link, seed=args.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panelnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a panel network along the penalty path")
    p.add_argument("--data", required=True, help="input CSV")
    p.add_argument("--id", required=True, help="unit id column")
    p.add_argument("--time", required=True, help="time column")
    p.add_argument("--y", required=True, help="outcome column")
    p.add_argument("--x", default="", help="comma-separated parametric (linear, unpenalised) columns")
    p.add_argument("--z", default="", help="comma-separated network input columns")
    p.add_argument("--cluster", default=None, help="cluster column (default: unit id)")
    p.add_argument("--split-col", default=None, help="column with 0=train 1=test 2=validation codes")
    p.add_argument("--penalize-beta", action="store_true", help="also penalise the parametric coefficients")
    p.add_argument("--cov", choices=["cluster", "homoskedastic"], default="cluster")
    p.add_argument("--dof", choices=["effective", "raw"], default="effective",
                   help="residual degrees of freedom: parameter count or ridge hat-matrix trace")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--model", required=True, help="output model file")
    p.add_argument("--report", help="output fit report (default: <model>.report)")
    p.add_argument("--fitted", help="optional CSV of fitted values for every input row")
    _add_model_flags(p)

    p = sub.add_parser("predict", help="predictions with intervals from a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--level", type=float, default=0.95)
    for flag in ("--id", "--time", "--x", "--z"):
        p.add_argument(flag, default=None, help="override the column stored in the model")

    p = sub.add_parser("simulate", help="write one synthetic panel as CSV")
    _add_dgp_flags(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("mc", help="Monte Carlo study: per-replication CSV and a summary table")
    _add_dgp_flags(p)
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--full-scale", action="store_true", help="1000 replications")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--out", required=True, help="per-replication CSV")
    p.add_argument("--summary", help="summary table path (default: stdout)")
    _add_model_flags(p, seed=False)
    return parser


def cmd_fit(args) -> int:
    x, z = _names(args.x), _names(args.z)
    schema = CsvSchema(args.id, args.time, args.y, x, z, args.cluster)
    extra = (args.split_col,) if args.split_col else ()
    data, cols = read_columns(args.data, schema, extra)
    split = split_by_codes(data, cols[args.split_col]) if args.split_col else temporal_split(data)
    config = _fit_config(args)
    arch = Architecture(args.layers, len(x), len(z), _activation(args))
    model, trace = lambda_path(split.train, split.test, arch, config, penalize_beta=args.penalize_beta)
    inference = infer(model, split.train, args.cov, args.dof)
    columns = {"id": args.id, "time": args.time, "y": args.y, "x": list(x), "z": list(z)}
    save_model(args.model, model, inference, columns)

    lines = ["# panelnn fit report",
             f"lambda_selected={format_float(model.lam)}",
             f"lambda_tilde={format_float(model.lambda_tilde)}",
             f"test_mse={format_float(model.test_mse)}"]
    if split.validation is not None:
        lines.append(f"validation_mse={format_float(model.mse(split.validation))}")
    lines += [f"covariance={inference.cov.estimator_kind}", f"dof={format_float(inference.cov.dof)}",
              f"sigma2={format_float(inference.sigma2)}", "", "[lambda_trace]",
              "lambda,test_mse,penalized_norm_sq,epochs"]
    lines += [",".join([format_float(s.lam), format_float(s.test_mse), format_float(s.penalized_norm_sq),
                        str(s.epochs)]) for s in trace]
    lines += ["", f"[coefficients level={args.level}]", "name,estimate,se,lower,upper"]
    names = [n for n, m in zip(x, model.penalty.unpenalized_mask[: len(x)]) if m]
    for name, ci in zip(names, parametric_ci(model, inference.cov, args.level)):
        lines.append(",".join([name] + [format_float(v) for v in (ci.point, ci.se, ci.lower, ci.upper)]))
    report = args.report or f"{args.model}.report"
    Path(report).write_text("\n".join(lines) + "\n")

    if args.fitted:
        fitted = model.predict_panel(data)
        with open(args.fitted, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["unit", "time", "fitted"])
            for u, t, f in zip(data.unit_id, data.time, fitted):
                w.writerow([u, t, format_float(f)])
    return 0


def cmd_predict(args) -> int:
    saved = load_model(args.model)
    cols = saved.columns

    def pick(flag, key):
        if flag is not None:
            return flag
        if key not in cols:
            raise PanelNNError(f"model does not record column {key!r}; pass it explicitly")
        value = cols[key]
        return value if key in ("x", "z") else value[0]

    x = _names(args.x) if args.x is not None else tuple(pick(None, "x"))
    z = _names(args.z) if args.z is not None else tuple(pick(None, "z"))
    id_col, time_col = pick(args.id, "id"), pick(args.time, "time")
    # the outcome is not needed; any numeric column keeps the loader happy
    schema = CsvSchema(id_col, time_col, time_col, x, z)
    data, _ = read_columns(args.data, schema)
    model = saved.model
    if saved.inference is not None:
        point, se, lo, hi = prediction_arrays(model, saved.inference, data.X, data.Z, data.unit_id, args.level)
    else:
        point = model.predict_panel(data)
        se = lo = hi = np.full_like(point, np.nan)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["unit", "time", "prediction", "se", "lower", "upper"])
        for row in zip(data.unit_id, data.time, point, se, lo, hi):
            w.writerow([row[0], row[1]] + [format_float(v) for v in row[2:]])
    return 0


def cmd_simulate(args) -> int:
    sim = generate_panel(_dgp(args))
    save_csv(sim.data, args.out, extra={"y_star": [float(v) for v in sim.y_star]})
    return 0


def cmd_mc(args) -> int:
    reps = 1000 if args.full_scale else args.reps
    dgp = _dgp(args)
    # replication seeds come from --seed through the DGP config
    args.seed = None
    config = _fit_config(args)
    arch = Architecture(args.layers, 1, 5, _activation(args))
    result = run_monte_carlo(dgp, reps, arch, config, jobs=args.jobs, level=args.level)
    write_rep_csv(result, args.out)
    table = summary_table(result)
    if args.summary:
        Path(args.summary).write_text(table)
    else:
        sys.stdout.write(table)
    return 0


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate, "mc": cmd_mc}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PanelNNError, OSError, ValueError) as exc:
        print(f"panelnn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
