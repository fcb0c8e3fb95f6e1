"""Command-line entry point: ``glmm-asym {fit, ci, simulate, verify}``."""

from __future__ import annotations

import argparse
import json
import sys
import warnings

import numpy as np

from . import __version__
from .asymvar import CovarianceError
from .fitting import fit
from .integrate import QuadratureError
from .model import GlmmSpec, GroupedDataset, InnerModeError, parse_phi_mode
from .studentize import confidence_intervals, parameter_names
from .matcalc import _vech_indices

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_WARNINGS = 2
EXIT_USAGE = 64


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="CSV with columns group,y,x1,...,xK")
    p.add_argument("--family", required=True, choices=("gaussian", "bernoulli", "poisson", "gamma"))
    p.add_argument("--d-r", dest="d_r", type=int, required=True, help="number of leading columns with random effects")
    p.add_argument(
        "--phi",
        default="default",
        help="dispersion: pearson, profile-mle, fixed or fixed(<value>) (default depends on family)",
    )
    p.add_argument("--json", action="store_true", help="print machine-readable JSON")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glmm-asym",
        description="Laplace-fitted GLMMs with one-term and two-term asymptotic covariances.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model and print the estimates")
    _add_model_args(p)

    p = sub.add_parser("ci", help="fit a model and print confidence intervals")
    _add_model_args(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--method", choices=("one", "two", "both"), default="both")

    p = sub.add_parser("simulate", help="run the logistic coverage study")
    p.add_argument("--config", help="flat key = value file (keys: m_grid, n_rule, replicates, seed, alpha, beta, sigma)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=None, help="worker processes (overrides config and environment)")

    p = sub.add_parser("verify", help="run the expansion checks and print a pass/fail table")
    p.add_argument("--suite", default="all", help="miyata, u_star, scores, moments or all")
    p.add_argument("--replicates", type=int, default=50)
    p.add_argument("--seed", type=int, default=1)
    return parser


def _load_and_fit(args):
    data = GroupedDataset.from_csv(args.data)
    if not 1 <= args.d_r <= data.d_F:
        raise ValueError(f"--d-r must lie in [1, {data.d_F}]")
    mode, value = parse_phi_mode(args.phi)
    spec = GlmmSpec(args.family, data.d_F, args.d_r, mode, value)
    return data, spec, fit(data, spec)


def _fit_summary(data, result) -> dict:
    rows, cols = _vech_indices(result.d_R)
    return {
        "m": data.m,
        "N": data.N,
        "family": result.family.name,
        "converged": bool(result.converged),
        "boundary": bool(result.boundary),
        "loglik": float(result.loglik),
        "iterations": int(result.iterations),
        "phi": float(result.phi_hat),
        "parameters": dict(
            zip(
                parameter_names(result.d_F, result.d_R),
                [float(v) for v in np.concatenate([result.beta_hat, result.sigma_hat[rows, cols]])],
            )
        ),
    }


def cmd_fit(args) -> int:
    data, _, result = _load_and_fit(args)
    summary = _fit_summary(data, result)
    if args.json:
        print(json.dumps(summary, indent=2))
    else:
        print(f"groups {summary['m']}  rows {summary['N']}  family {summary['family']}")
        print(f"converged {summary['converged']}  boundary {summary['boundary']}  loglik {summary['loglik']:.6f}")
        print(f"phi {summary['phi']:.6g}")
        for name, v in summary["parameters"].items():
            print(f"{name:>10s} {v: .6f}")
    return EXIT_OK if result.converged else EXIT_FAILED


def cmd_ci(args) -> int:
    data, _, result = _load_and_fit(args)
    report = confidence_intervals(result, data, args.alpha)
    methods = {"one": ("one-term",), "two": ("two-term",), "both": ("one-term", "two-term")}[args.method]
    ivs = [iv for iv in report.intervals if iv.method in methods]
    if args.json:
        out = _fit_summary(data, result)
        out["alpha"] = args.alpha
        out["intervals"] = [iv.__dict__ for iv in ivs]
        print(json.dumps(out, indent=2))
    else:
        print(f"{'parameter':>10s} {'method':>9s} {'estimate':>10s} {'se':>10s} {'lower':>10s} {'upper':>10s}")
        for iv in ivs:
            print(
                f"{iv.parameter:>10s} {iv.method:>9s} {iv.estimate:10.5f} {iv.se:10.5f} {iv.lower:10.5f} {iv.upper:10.5f}"
            )
    return EXIT_OK if result.converged else EXIT_FAILED


def cmd_simulate(args) -> int:
    from .simulation import SimConfig, emit_outputs, run_coverage

    config = SimConfig.from_file(args.config) if args.config else SimConfig()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        run = run_coverage(config, workers=args.workers)
    paths = emit_outputs(run, args.out)
    for path in paths:
        print(path)
    for w in run.warnings:
        print(f"warning: m={w.m} n={w.n}: {w.message}", file=sys.stderr)
    return EXIT_WARNINGS if run.warnings else EXIT_OK


def cmd_verify(args) -> int:
    from .oracle import run_suite

    results = run_suite(args.suite, args.replicates, args.seed)
    print(f"{'check':<34s} {'measured':>12s} {'threshold':>10s}  result")
    for r in results:
        print(f"{r.name:<34s} {r.measured:12.4g} {r.threshold:10.4g}  {'pass' if r.passed else 'FAIL'}")
        if r.detail:
            print(f"    {r.detail}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


COMMANDS = {"fit": cmd_fit, "ci": cmd_ci, "simulate": cmd_simulate, "verify": cmd_verify}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InnerModeError, CovarianceError, QuadratureError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
