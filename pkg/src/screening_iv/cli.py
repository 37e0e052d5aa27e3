"""Command-line front end.

    screening-iv simulate   --config cfg.json --out data.csv [--seed S]
    screening-iv estimate   --data data.csv [--time T] [--method all] [--bootstrap B] [--seed S] [--out res.json]
    screening-iv hr-curve   --data data.csv --grid 1:7:0.05 [--bootstrap B] [--seed S] --out curve.csv
    screening-iv sim-study  --config cfg.json [--replicates R] [--bootstrap B] [--time T] --out study.csv [--threads K]

Results go to files (or standard output for ``estimate``); progress and
errors go to standard error.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import tempfile
from pathlib import Path

from .core import dataset_to_csv, read_dataset
from .errors import EstimationError, ScreeningIVError
from .inference import bootstrap_se, hr_curve, parse_grid, run_sim_study, select_timepoint
from .iv import estimate, resolve_methods
from .simulator import ScenarioConfig, simulate_trial


class UsageError(Exception):
    pass


def _atomic_write(path: Path, text: str) -> None:
    """Write via a temporary sibling so a failed run leaves no partial file."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _input(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {path}")
    return p


def _output(path: str) -> Path:
    p = Path(path)
    parent = p.parent if str(p.parent) else Path(".")
    if not parent.is_dir():
        raise UsageError(f"output directory does not exist: {parent}")
    return p


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be a non-negative integer")
    return v


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_simulate(args) -> int:
    cfg_path, out = _input(args.config), _output(args.out)
    cfg = ScenarioConfig.load(cfg_path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    ds = simulate_trial(cfg)
    _atomic_write(out, dataset_to_csv(ds))
    print(json.dumps(ds.summary(), indent=2))
    return 0


def cmd_estimate(args) -> int:
    data = _input(args.data)
    out = _output(args.out) if args.out else None
    keys = resolve_methods(args.method)
    ds = read_dataset(data, args.horizon)
    t = ds.censor_horizon if args.time is None else args.time
    results = estimate(ds, keys, t)
    docs, n_ok = [], 0
    for key, res in results.items():
        if isinstance(res, EstimationError):
            _progress(f"{key}: {type(res).__name__}: {res}")
            docs.append({"method": key, "error": type(res).__name__, "message": str(res),
                         "diagnostics": _plain(res.diagnostics)})
            continue
        if args.bootstrap > 0:
            _progress(f"{key}: bootstrap with B={args.bootstrap}")
            try:
                boot = bootstrap_se(ds, key, t, args.bootstrap, args.seed)
            except EstimationError as exc:
                _progress(f"{key}: {type(exc).__name__}: {exc}")
                docs.append({"method": key, "error": type(exc).__name__, "message": str(exc),
                             "diagnostics": _plain(exc.diagnostics)})
                continue
            res.se, res.ci_lower, res.ci_upper = boot.se, boot.ci_lower, boot.ci_upper
        docs.append({"method": key, **res.to_json()})
        n_ok += 1
    text = json.dumps(docs, indent=2) + "\n"
    if out is None:
        sys.stdout.write(text)
    else:
        _atomic_write(out, text)
    return 0 if n_ok else 1


def _plain(d):
    return json.loads(json.dumps(d, default=lambda v: v.tolist() if hasattr(v, "tolist") else str(v)))


def cmd_hr_curve(args) -> int:
    data, out = _input(args.data), _output(args.out)
    grid = parse_grid(args.grid)
    ds = read_dataset(data, args.horizon)
    _progress(f"hr-curve: {grid.size} grid points, B={args.bootstrap}")
    curve = hr_curve(ds, grid, args.bootstrap, args.seed, stratified=args.stratified)
    summary = select_timepoint(curve)
    summary["min_variance"]["hr"] = float(math.exp(summary["min_variance"]["log_theta"]))
    summary["ivw_hr"] = float(math.exp(summary["ivw"]))
    summary["n_missing"] = int((~curve.ok).sum())
    _atomic_write(out, curve.to_csv())
    _atomic_write(Path(str(out) + ".summary.json"), json.dumps(summary, indent=2) + "\n")
    return 0


def cmd_sim_study(args) -> int:
    cfg_path, out = _input(args.config), _output(args.out)
    cfg = ScenarioConfig.load(cfg_path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    result = run_sim_study(cfg, args.method, R=args.replicates, B=args.bootstrap, eval_t=args.time,
                           threads=args.threads, stratified=args.stratified, n_oracle=args.oracle_size,
                           progress=True)
    _atomic_write(out, result.to_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="screening-iv",
                                     description="Early-treatment effect estimation in screening trials.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one trial dataset from a scenario config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_seed)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate subgroup effects from a dataset CSV")
    p.add_argument("--data", required=True)
    p.add_argument("--time", type=float, help="evaluation time (default: censoring horizon)")
    p.add_argument("--method", default="all", help="ee, mle, acfr, pcfr, its or all (comma-separated)")
    p.add_argument("--bootstrap", type=_nonneg_int, default=0, help="bootstrap replicates (0: no SE)")
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--horizon", type=float, help="censoring horizon (default: largest event time)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("hr-curve", help="hazard ratio estimates over a grid of evaluation times")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", required=True, help="start:stop:step, e.g. 1:7:0.05")
    p.add_argument("--bootstrap", type=_nonneg_int, default=500)
    p.add_argument("--seed", type=_seed, default=0)
    p.add_argument("--horizon", type=float)
    p.add_argument("--stratified", action="store_true", help="resample within arms")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_hr_curve)

    p = sub.add_parser("sim-study", help="Monte Carlo study of the estimators")
    p.add_argument("--config", required=True)
    p.add_argument("--replicates", type=_nonneg_int, default=500)
    p.add_argument("--bootstrap", type=_nonneg_int, default=50)
    p.add_argument("--time", type=float)
    p.add_argument("--method", default="all")
    p.add_argument("--seed", type=_seed)
    p.add_argument("--threads", type=int, default=None, help="worker processes (default: all cores)")
    p.add_argument("--oracle-size", type=int, default=10**6, help="subjects in the marginal-truth oracle")
    p.add_argument("--stratified", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sim_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ScreeningIVError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
