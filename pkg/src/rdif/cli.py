"""Command-line entry point: ``rdif analyze | fit | simulate``.

Exit codes: 0 success, 2 invalid input or arguments, 3 numerical failure
(non-convergence, degenerate item).  Diagnostics go to standard error and
output files are only ever replaced whole.
"""

import argparse
import json
import logging
import os
import sys
import tempfile
import warnings
from dataclasses import replace

import numpy as np

from . import __version__
from .calibration import load_calibration, save_calibration, save_report
from .dif import analyze
from .exceptions import (
    AllWeightsZeroError,
    DegenerateItemError,
    ParseError,
    SingularCovarianceError,
    SingularInformationError,
    StationaryStartError,
    ValidationError,
    VarianceOrderError,
)
from .irt import fit_2pl, make_pair, read_responses
from .simulation import SimCondition, run_sim1, run_sim2, sim1_condition, sim2_condition

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_NUMERIC = 3

NUMERIC_ERRORS = (
    DegenerateItemError,
    AllWeightsZeroError,
    StationaryStartError,
    SingularInformationError,
    SingularCovarianceError,
    VarianceOrderError,
    np.linalg.LinAlgError,
)


class NonConvergence(Exception):
    pass


def _alpha(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid alpha {text!r}") from None
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError("alpha must be in (0,1)")
    return value


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return value


def atomic_write(path, data):
    """Write ``data`` to ``path`` via a temporary file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".rdif-", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _format_for(path, explicit=None):
    if explicit:
        return explicit
    return "csv" if path.lower().endswith(".csv") else "json"


def _read_bytes(path):
    with open(path, "rb") as fh:
        return fh.read()


def cmd_analyze(args):
    fmt = _format_for(args.input, args.format)
    pair = load_calibration(_read_bytes(args.input), format=fmt)
    report = analyze(
        pair,
        alpha=args.alpha,
        log_slope=args.log_slope,
        update_tau=not args.fixed_tau,
        start=args.start,
        downtune_alpha=args.downtune,
        solver=args.solver,
    )
    for name, fit in (("intercept", report.theta_fit), ("slope", report.sigma_fit)):
        if not fit.converged:
            raise NonConvergence(f"{name} scaling fit did not converge in {fit.iterations} iterations")
    atomic_write(args.out, save_report(report, _format_for(args.out, args.report_format)))
    flagged = [r.index for r in report.items if r.flag_intercept or r.flag_slope or r.flag_joint]
    print(f"theta={report.theta_fit.theta:.6g} sigma-scale={report.sigma_fit.theta:.6g} "
          f"flagged items: {flagged or 'none'}", file=sys.stderr)
    return EXIT_OK


def _indices(ids):
    try:
        out = [int(i) for i in ids]
    except ValueError:
        return None
    return out if len(set(out)) == len(out) else None


def cmd_fit(args):
    r0 = read_responses(_read_bytes(args.group0))
    r1 = read_responses(_read_bytes(args.group1))
    if r0.ids != r1.ids:
        raise ValidationError("group files must have the same item columns in the same order")
    fits = []
    for name, data in (("group0", r0), ("group1", r1)):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            fit = fit_2pl(data, quad_points=args.quad)
        for w in caught:
            print(f"warning: {w.message}", file=sys.stderr)
        if not fit.converged:
            lo_hi = [data.ids[j] for j in np.flatnonzero((fit.a_hat <= 0.05) | (fit.a_hat >= 20.0))]
            detail = f"; slopes at bound for items {lo_hi}" if lo_hi else ""
            raise NonConvergence(f"{name}: 2PL fit did not converge after {fit.em_iterations} EM cycles{detail}")
        fits.append(fit)
    pair = make_pair(*fits, indices=_indices(r0.ids))
    atomic_write(args.out, save_calibration(pair, _format_for(args.out, args.format)))
    return EXIT_OK


def _load_config(path, design):
    overrides = {}
    if path:
        try:
            overrides = json.loads(_read_bytes(path).decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ParseError(f"malformed config: {exc}") from None
        if not isinstance(overrides, dict):
            raise ParseError("config must be a JSON object")
    sweep_key = "dif_counts" if design == "sim1" else "ns"
    sweep = overrides.pop(sweep_key, None)
    unknown = set(overrides) - set(SimCondition.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    make = sim1_condition if design == "sim1" else sim2_condition
    try:
        base = make(**overrides)
    except TypeError as exc:
        raise ValidationError(f"bad config: {exc}") from None
    if sweep is not None:
        if not isinstance(sweep, list) or not all(isinstance(v, int) and v >= 0 for v in sweep):
            raise ValidationError(f"{sweep_key} must be a list of non-negative integers")
        if design == "sim1" and any(v > base.m for v in sweep):
            raise ValidationError(f"dif_count must be in [0, m={base.m}]")
    return base, sweep


def cmd_simulate(args):
    base, sweep = _load_config(args.config, args.design)
    changes = {}
    if args.reps is not None:
        changes["reps"] = args.reps
    if args.seed is not None:
        changes["seed"] = args.seed
    if changes:
        base = replace(base, **changes)
    if args.design == "sim1":
        result = run_sim1(base, dif_counts=sweep, jobs=args.jobs)
    else:
        result = run_sim2(base, ns=sweep or (200, 350, 500), jobs=args.jobs)
    theta_path = args.theta_out or os.path.splitext(args.out)[0] + "_theta.csv"
    csv_bytes, theta_bytes = result.to_csv(), result.theta_csv()
    atomic_write(args.out, csv_bytes)
    atomic_write(theta_path, theta_bytes)
    failed = sum(r["failed"] for r in result.rows)
    if failed:
        print(f"{failed} method-replications failed and were counted as unflagged", file=sys.stderr)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="rdif", description="Robust DIF detection for two-group 2PL calibrations.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="run R-DIF tests on a calibration pair")
    p.add_argument("--input", required=True, help="calibration pair (JSON, or CSV by extension)")
    p.add_argument("--format", choices=("json", "csv"), help="input format (default: by extension)")
    p.add_argument("--alpha", type=_alpha, default=0.05)
    p.add_argument("--log-slope", action="store_true", help="estimate log(sigma) instead of sigma")
    p.add_argument("--start", choices=("med3", "median", "lts", "grid"), default="med3")
    p.add_argument("--downtune", type=_alpha, default=None, metavar="A", help="estimate with tuning alpha A")
    p.add_argument("--solver", choices=("irls", "newton"), default="irls")
    p.add_argument("--fixed-tau", action="store_true", help="hold null variances at the starting value")
    p.add_argument("--out", required=True)
    p.add_argument("--report-format", choices=("json", "csv"), help="report format (default: by extension)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit", help="calibrate both groups and write a calibration pair")
    p.add_argument("--group0", required=True, help="reference-group response CSV")
    p.add_argument("--group1", required=True, help="focal-group response CSV")
    p.add_argument("--quad", type=_positive_int, default=61, help="quadrature points")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=("json", "csv"), help="output format (default: by extension)")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("simulate", help="run the breakdown (sim1) or power (sim2) study")
    p.add_argument("--design", choices=("sim1", "sim2"), required=True)
    p.add_argument("--config", help="JSON object of condition fields, plus dif_counts (sim1) or ns (sim2)")
    p.add_argument("--out", required=True)
    p.add_argument("--theta-out", help="per-replication estimates (default: <out>_theta.csv)")
    p.add_argument("--reps", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=_positive_int, default=None, help="worker processes (default: all CPUs)")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, stream=sys.stderr,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NonConvergence,) + NUMERIC_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
