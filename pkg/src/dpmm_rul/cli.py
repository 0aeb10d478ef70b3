"""Command line entry points.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import cmapss, datagen, experiments
from .config import ExperimentConfig, load_experiment_config, load_fleet_config, pipeline_overrides
from .errors import DataError, InvalidInputError
from .metrics import nmi, rmse
from .pipeline import run, write_csv
from .preprocess import STRATEGIES
from .structure import SCORE_VARIANTS

log = logging.getLogger("dpmm_rul")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _cmd_simulate(args) -> int:
    cfg = load_fleet_config(args.config) if args.config else datagen.default_config(args.modes)
    if args.systems_per_mode is not None:
        cfg.systems_per_mode = args.systems_per_mode
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.__post_init__()
    fleet = datagen.generate_fleet(cfg)
    os.makedirs(args.out, exist_ok=True)
    S = fleet[0].n_sensors if fleet else 0
    header = ("cycle", *(f"sensor_{s + 1}" for s in range(S)))
    for h in fleet:
        rows = [[str(t + 1), *(repr(float(v)) for v in h.readings[t])] for t in range(h.length)]
        write_csv(os.path.join(args.out, f"{h.system_id}.csv"), header, rows)
    write_csv(os.path.join(args.out, "manifest.csv"), ("system_id", "failure_time", "true_mode"),
              [[h.system_id, repr(h.failure_time), h.true_mode or ""] for h in fleet])
    print(f"wrote {len(fleet)} systems to {args.out}")
    return EXIT_OK


def _experiment(args) -> ExperimentConfig:
    exp = load_experiment_config(args.config) if args.config else ExperimentConfig()
    for key in ("scenario", "score", "seed", "data_dir", "labels"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(exp, key, value)
    if getattr(args, "modes", None) is not None:
        exp.n_modes = args.modes
    for key in ("n_train", "n_test", "arrival"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(exp, key, value)
    over = {}
    if args.align is not None:
        over["align"] = args.align
    if args.omega is not None:
        over["omega"] = args.omega
    if args.rul_cap is not None:
        over["rul_cap"] = args.rul_cap
    if args.max_iters is not None:
        over["max_iters"] = args.max_iters
    if args.window is not None:
        over["window"] = args.window
    if args.set:
        over.update(pipeline_overrides(dict(kv.split("=", 1) for kv in args.set)))
    exp.pipeline.update(over)
    exp.__post_init__()
    return exp


def prepare(exp: ExperimentConfig):
    """Train fleet, test fleet and stream batches for an experiment."""
    window = exp.pipeline_config().window
    if exp.scenario == experiments.CMAPSS:
        if not exp.data_dir:
            raise DataError("the cmapss scenario needs --data-dir")
        train, test = cmapss.load_cmapss(*cmapss.fd003_paths(exp.data_dir, exp.subset), labels_path=exp.labels)
        return train, test, []
    if exp.fleet is not None:
        fcfg = exp.fleet
    elif exp.scenario == experiments.SIM_NONSTATIONARY:
        fcfg = experiments.nonstationary_config(exp.n_modes - 1, exp.n_train, exp.n_test, exp.seed, exp.arrival)
    else:
        fcfg = experiments.stationary_config(exp.n_modes, exp.n_train, exp.n_test, exp.seed)
    sc = experiments.simulated(fcfg, exp.n_test, window)
    return sc.train, sc.test, sc.stream


def _cmd_run(args) -> int:
    exp = _experiment(args)
    train, test, stream = prepare(exp)
    report = run(exp.pipeline_config(), train, test, stream, out_dir=args.out)
    last = report.records[-1]
    print(f"iterations={len(report.records)} converged={int(report.converged)} modes={last.n_modes} "
          f"nmi={last.nmi:.4f} test_rmse={last.test_rmse:.3f}")
    return EXIT_OK


def _read_csv(path):
    try:
        with open(path, newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None


def _cmd_evaluate(args) -> int:
    rows = []
    if args.predictions:
        preds = _read_csv(args.predictions)
        try:
            truth = np.array([float(r["true_rul"]) for r in preds])
            pred = np.array([float(r["predicted_rul"]) for r in preds])
        except (KeyError, ValueError) as exc:
            raise DataError(f"{args.predictions}: bad predictions file ({exc})") from None
        rows.append(("rmse", rmse(pred, truth)))
        rows.append(("n_predictions", len(pred)))
    if args.assignments:
        assign = [r for r in _read_csv(args.assignments) if r.get("set", "train") == "train"]
        if assign and all(r.get("true_mode") for r in assign):
            rows.append(("nmi", nmi([r["true_mode"] for r in assign], [r["mode"] for r in assign])))
        rows.append(("n_modes", len({r["mode"] for r in assign})))
    if not rows:
        raise UsageError("evaluate needs --predictions and/or --assignments")
    for name, value in rows:
        print(f"{name}={value}")
    if args.out:
        write_csv(args.out, ("metric", "value"), [[n, repr(v) if isinstance(v, float) else str(v)] for n, v in rows])
    return EXIT_OK


def _cmd_sweep(args) -> int:
    exp = _experiment(args)
    train, _, _ = prepare(exp)
    grid = tuple(args.grid) if args.grid else experiments.OMEGA_GRID
    rows = experiments.sweep_omega(exp.pipeline_config(), train, grid, args.folds, exp.seed)
    header = ("omega", "mean_val_rmse", "mean_silhouette", "mean_j", "mean_modes", "folds")
    out = [[repr(r.omega), repr(r.mean_val_rmse), repr(r.mean_silhouette), repr(r.mean_j), repr(r.mean_modes),
            str(r.folds)] for r in rows]
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_csv(os.path.join(args.out, "omega_sweep.csv"), header, out)
    best = max(rows, key=lambda r: r.mean_j)
    for r in rows:
        print(f"omega={r.omega:g} rmse={r.mean_val_rmse:.3f} silhouette={r.mean_silhouette:.4f} "
              f"J={r.mean_j:.4f} modes={r.mean_modes:.2f}")
    print(f"best omega={best.omega:g}")
    return EXIT_OK


def _add_experiment_args(p):
    p.add_argument("--config", help="key/value experiment file")
    p.add_argument("--scenario", choices=experiments.SCENARIOS)
    p.add_argument("--modes", type=int, help="number of simulated modes (total, including late ones)")
    p.add_argument("--seed", type=int)
    p.add_argument("--score", choices=SCORE_VARIANTS, help="structure-search score (ablations: elbo, rul-loss)")
    p.add_argument("--align", choices=STRATEGIES)
    p.add_argument("--omega", type=float)
    p.add_argument("--data-dir", help="directory with train_FD003.txt, test_FD003.txt, RUL_FD003.txt")
    p.add_argument("--labels", help="optional unit-to-mode label file for C-MAPSS")
    p.add_argument("--rul-cap", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--n-train", type=int, help="training systems per simulated mode")
    p.add_argument("--n-test", type=int, help="test systems per simulated mode")
    p.add_argument("--arrival", type=int, help="iteration at which the late mode arrives")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any pipeline setting")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dpmm-rul", description="Failure-mode discovery and RUL prediction.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic fleet as CSV files")
    p.add_argument("--config", help="key/value fleet file")
    p.add_argument("--modes", type=int, default=4)
    p.add_argument("--systems-per-mode", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("run", help="run the discovery and prognostics loop")
    _add_experiment_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("evaluate", help="recompute metrics from run outputs")
    p.add_argument("--predictions", help="predictions.csv")
    p.add_argument("--assignments", help="final_assignments.csv")
    p.add_argument("--out", help="write metrics to this CSV")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("sweep-omega", help="K-fold cross-validation over the omega grid")
    _add_experiment_args(p)
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--grid", type=float, nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=_cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a command is required (simulate, run, evaluate, sweep-omega)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidInputError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
