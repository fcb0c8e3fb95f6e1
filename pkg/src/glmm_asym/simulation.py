"""Coverage study for the two-level logistic model with a random intercept and slope.

Data follow ``x = (1, X1, X2, X3, X4)`` with ``X_k ~ U(0, 1)``, random effects on
the first two coefficients and ``Y ~ Bernoulli(logistic(eta))``. Each replicate
draws from its own Philox stream keyed by ``(seed, m, replicate)``, so results
do not depend on how replicates are spread over worker processes.
"""

from __future__ import annotations

import csv
import json
import math
import os
import platform
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import scipy
from threadpoolctl import threadpool_limits

from . import __version__
from .asymvar import CovarianceError, SingularOmegaError
from .expfam import get_family
from .fitting import fit
from .integrate import QuadratureError, psd_factor
from .matcalc import _vech_indices
from .model import GlmmSpec, GroupedDataset, InnerModeError
from .studentize import METHODS, confidence_intervals, parameter_names

TRUTH_BETA = (0.35, 0.96, -0.47, 1.06, -1.31)
TRUTH_SIGMA = ((0.56, -0.34), (-0.34, 0.89))
D_F = 5
D_R = 2
FAILURE_LIMIT = 0.10
WORKERS_ENV = "GLMM_ASYM_WORKERS"
_BLAS_ENV = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


@dataclass(frozen=True)
class Truth:
    beta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).ravel()
        sigma = np.array(self.sigma, dtype=float)
        if beta.size != D_F:
            raise ValueError(f"truth needs {D_F} fixed effects, got {beta.size}")
        if sigma.shape != (D_R, D_R) or not np.allclose(sigma, sigma.T, rtol=0, atol=1e-12):
            raise ValueError(f"truth Sigma must be a symmetric {D_R}x{D_R} matrix")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def default(cls) -> "Truth":
        return cls(np.array(TRUTH_BETA), np.array(TRUTH_SIGMA))

    def vector(self) -> np.ndarray:
        rows, cols = _vech_indices(D_R)
        return np.concatenate([self.beta, self.sigma[rows, cols]])


def generate_dataset(m: int, n: int, truth: Truth, rng: np.random.Generator, return_effects: bool = False):
    """Draw U, then X, then Y from ``rng``; groups are balanced with ``n`` rows each.

    With ``return_effects`` the ``(m, 2)`` array of random effects is returned
    alongside the dataset.
    """
    if m < 1 or n < 1:
        raise ValueError("m and n must be positive")
    L = psd_factor(truth.sigma)
    U = rng.standard_normal((m, D_R)) @ L.T
    X = np.column_stack([np.ones(m * n), rng.random((m * n, D_F - 1))])
    eta = X @ truth.beta + np.einsum("ij,ij->i", X[:, :D_R], np.repeat(U, n, axis=0))
    y = (rng.random(m * n) < 1.0 / (1.0 + np.exp(-eta))).astype(float)
    data = GroupedDataset(X, y, np.arange(0, m * n + 1, n))
    return (data, U) if return_effects else data


def replicate_rng(seed: int, m: int, replicate: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(m), int(replicate)])))


# ---------------------------------------------------------------------------
# configuration


def _parse_n_rule(text: str) -> tuple[str, float]:
    t = str(text).replace(" ", "").lower()
    if t.startswith("m/"):
        return "div", float(t[2:])
    if t.startswith("m*"):
        return "mul", float(t[2:])
    return "const", float(t)


@dataclass(frozen=True)
class SimConfig:
    m_grid: tuple = (100, 150, 200)
    n_rule: str = "m/10"
    replicates: int = 200
    seed: int = 20240917
    alpha: float = 0.05
    truth: Truth = field(default_factory=Truth.default)
    family: str = "bernoulli"
    workers: int | None = None

    def __post_init__(self):
        grid = tuple(int(m) for m in self.m_grid)
        if not grid or min(grid) < 2:
            raise ValueError("m_grid needs at least one group count >= 2")
        object.__setattr__(self, "m_grid", grid)
        if int(self.replicates) < 1:
            raise ValueError("replicates must be at least 1")
        object.__setattr__(self, "replicates", int(self.replicates))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0.0 < float(self.alpha) < 1.0:
            raise ValueError("alpha must lie strictly between 0 and 1")
        if get_family(self.family).name != "bernoulli":
            raise ValueError("the coverage study is defined for the bernoulli family only")
        if np.linalg.eigvalsh(self.truth.sigma).min() <= 0:
            raise ValueError("truth Sigma must be positive definite")
        kind, k = _parse_n_rule(self.n_rule)
        if not k > 0:
            raise ValueError(f"bad n_rule {self.n_rule!r}")
        for m in grid:
            if self.n_for(m) < 2:
                raise ValueError(f"n_rule gives n < 2 at m={m}")

    def n_for(self, m: int) -> int:
        kind, k = _parse_n_rule(self.n_rule)
        if kind == "div":
            return int(m // k)
        if kind == "mul":
            return int(math.floor(m * k))
        return int(k)

    @classmethod
    def from_text(cls, text: str) -> "SimConfig":
        """Parse flat ``key = value`` lines; ``#`` starts a comment."""
        kw, beta, sigma = {}, None, None
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "m_grid":
                kw["m_grid"] = tuple(int(v) for v in value.replace(",", " ").split())
            elif key == "n_rule":
                kw["n_rule"] = value
            elif key in ("replicates", "seed", "workers"):
                kw[key] = int(value)
            elif key == "alpha":
                kw["alpha"] = float(value)
            elif key == "family":
                kw["family"] = value
            elif key == "beta":
                beta = [float(v) for v in value.replace(",", " ").split()]
            elif key == "sigma":
                sigma = [float(v) for v in value.replace(",", " ").split()]
            else:
                raise ValueError(f"line {lineno}: unknown key {key!r}")
        if beta is not None or sigma is not None:
            default = Truth.default()
            b = default.beta if beta is None else np.array(beta)
            if sigma is None:
                S = default.sigma
            elif len(sigma) == 3:
                S = np.array([[sigma[0], sigma[1]], [sigma[1], sigma[2]]])
            elif len(sigma) == 4:
                S = np.array(sigma).reshape(2, 2)
            else:
                raise ValueError("sigma takes vech (3 values) or the full 2x2 matrix (4 values)")
            kw["truth"] = Truth(b, S)
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "SimConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def to_dict(self) -> dict:
        rows, cols = _vech_indices(D_R)
        return {
            "m_grid": list(self.m_grid),
            "n_rule": self.n_rule,
            "replicates": self.replicates,
            "seed": self.seed,
            "alpha": self.alpha,
            "family": self.family,
            "beta": [float(v) for v in self.truth.beta],
            "sigma": [float(v) for v in self.truth.sigma[rows, cols]],
        }


# ---------------------------------------------------------------------------
# replicates


@dataclass(frozen=True)
class ReplicateOutcome:
    m: int
    replicate: int
    covered: np.ndarray | None  # (len(METHODS), n_params) booleans
    failure: str = ""


@dataclass(frozen=True)
class CoverageRecord:
    m: int
    n: int
    parameter: str
    method: str
    coverage: float
    se: float
    replicates: int
    failures: int


@dataclass(frozen=True)
class ExperimentWarning:
    m: int
    n: int
    failures: int
    replicates: int
    message: str


@dataclass
class CoverageRun:
    config: SimConfig
    records: list
    warnings: list
    outcomes: list

    def indicators(self, m: int) -> np.ndarray:
        """Coverage indicators of the successful replicates at ``m``, shape (R, methods, params)."""
        rows = [o.covered for o in self.outcomes if o.m == m and o.covered is not None]
        return np.array(rows, dtype=bool).reshape(len(rows), len(METHODS), -1)


_RECOVERABLE = (InnerModeError, CovarianceError, SingularOmegaError, QuadratureError, np.linalg.LinAlgError, ValueError)


def run_replicate(config: SimConfig, m: int, replicate: int) -> ReplicateOutcome:
    n = config.n_for(m)
    data = generate_dataset(m, n, config.truth, replicate_rng(config.seed, m, replicate))
    spec = GlmmSpec("bernoulli", D_F, D_R, "fixed", 1.0)
    truth = config.truth.vector()
    try:
        result = fit(data, spec)
        if not result.converged:
            return ReplicateOutcome(m, replicate, None, f"fit did not converge: {result.message}")
        report = confidence_intervals(result, data, config.alpha)
    except _RECOVERABLE as exc:
        return ReplicateOutcome(m, replicate, None, f"{type(exc).__name__}: {exc}")
    covered = np.zeros((len(METHODS), truth.size), dtype=bool)
    for iv in report.intervals:
        k = report.names.index(iv.parameter)
        covered[METHODS.index(iv.method), k] = iv.covers(truth[k])
    return ReplicateOutcome(m, replicate, covered)


def _run_task(args):
    return run_replicate(*args)


def worker_count(config: SimConfig) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        return max(1, int(env))
    if config.workers:
        return max(1, int(config.workers))
    return max(1, os.cpu_count() or 1)


def _execute(tasks, workers: int) -> list:
    # BLAS runs single-threaded everywhere so floating-point results do not
    # depend on how many threads or processes the caller uses.
    if workers == 1:
        with threadpool_limits(limits=1):
            return [_run_task(t) for t in tasks]
    saved = {k: os.environ.get(k) for k in _BLAS_ENV}
    os.environ.update({k: "1" for k in _BLAS_ENV})
    try:
        with ProcessPoolExecutor(max_workers=workers, mp_context=get_context("spawn")) as pool:
            return list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    finally:
        for k, v in saved.items():
            if v is None:
                os.environ.pop(k, None)
            else:
                os.environ[k] = v


def binomial_se(p: float, r: int) -> float:
    return math.sqrt(p * (1.0 - p) / r) if r > 0 else math.nan


def aggregate(config: SimConfig, outcomes: list) -> tuple[list, list]:
    names = parameter_names(D_F, D_R)
    records, alerts = [], []
    for m in config.m_grid:
        n = config.n_for(m)
        mine = sorted((o for o in outcomes if o.m == m), key=lambda o: o.replicate)
        ok = [o.covered for o in mine if o.covered is not None]
        failures = len(mine) - len(ok)
        used = len(ok)
        counts = np.sum(ok, axis=0) if ok else np.zeros((len(METHODS), len(names)), dtype=int)
        for k, name in enumerate(names):
            for a, method in enumerate(METHODS):
                p = float(counts[a, k]) / used if used else math.nan
                records.append(CoverageRecord(m, n, name, method, p, binomial_se(p, used), used, failures))
        if failures > FAILURE_LIMIT * len(mine):
            reasons = sorted({o.failure.split(":", 1)[0] for o in mine if o.covered is None})
            alerts.append(
                ExperimentWarning(
                    m, n, failures, len(mine), f"{failures} of {len(mine)} replicates failed ({', '.join(reasons)})"
                )
            )
    return records, alerts


def run_coverage(config: SimConfig, workers: int | None = None) -> CoverageRun:
    """Generate, fit and interval-check every replicate at every grid point."""
    tasks = [(config, m, r) for m in config.m_grid for r in range(config.replicates)]
    outcomes = _execute(tasks, workers or worker_count(config))
    outcomes.sort(key=lambda o: (o.m, o.replicate))
    records, alerts = aggregate(config, outcomes)
    for w in alerts:
        warnings.warn(f"m={w.m}: {w.message}", RuntimeWarning, stacklevel=2)
    return CoverageRun(config, records, alerts, outcomes)


# ---------------------------------------------------------------------------
# output files

COVERAGE_COLUMNS = ("m", "n", "parameter", "method", "coverage", "se", "replicates", "failures")
PLOT_COLUMNS = ("m", "coverage_1t", "coverage_2t", "band_lo", "band_hi", "band_lo_1t", "band_hi_1t")


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


def _record_key(rec: CoverageRecord, names: list):
    order = names.index(rec.parameter) if rec.parameter in names else len(names)
    return (rec.m, order, rec.parameter, METHODS.index(rec.method))


def write_coverage_csv(records, path) -> None:
    names = parameter_names(D_F, D_R)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COVERAGE_COLUMNS)
        for rec in sorted(records, key=lambda r: _record_key(r, names)):
            w.writerow([_fmt(getattr(rec, c)) for c in COVERAGE_COLUMNS])


def read_coverage_csv(path) -> list:
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COVERAGE_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for row in reader:
            out.append(
                CoverageRecord(
                    int(row["m"]),
                    int(row["n"]),
                    row["parameter"],
                    row["method"],
                    float(row["coverage"]),
                    float(row["se"]),
                    int(row["replicates"]),
                    int(row["failures"]),
                )
            )
    return out


def _plot_rows(records, parameter: str) -> list:
    by_m = {}
    for rec in records:
        if rec.parameter == parameter:
            by_m.setdefault(rec.m, {})[rec.method] = rec
    rows = []
    for m in sorted(by_m):
        one, two = by_m[m].get("one-term"), by_m[m].get("two-term")
        if one is None or two is None:
            raise ValueError(f"parameter {parameter} at m={m} lacks one of the two methods")
        rows.append(
            [m, one.coverage, two.coverage, two.coverage - 2 * two.se, two.coverage + 2 * two.se,
             one.coverage - 2 * one.se, one.coverage + 2 * one.se]
        )
    return rows


def emit_outputs(run_or_records, out_dir, parameters=None, config: SimConfig | None = None) -> list:
    """Write coverage.csv, plotdata_<param>.csv per parameter and manifest.json; return the paths."""
    if isinstance(run_or_records, CoverageRun):
        records, alerts, config = run_or_records.records, run_or_records.warnings, run_or_records.config
        outcomes = run_or_records.outcomes
    else:
        records, alerts, outcomes = list(run_or_records), [], []
    if not records:
        raise ValueError("no coverage records to write")
    present = []
    for rec in records:
        if rec.parameter not in present:
            present.append(rec.parameter)
    if parameters is not None:
        parameters = list(parameters)
        if not parameters:
            raise ValueError("parameter subset is empty")
        unknown = [p for p in parameters if p not in present]
        if unknown:
            raise ValueError(f"no records for parameters {unknown}")
    else:
        parameters = present
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "coverage.csv"]
    write_coverage_csv([r for r in records if r.parameter in parameters], paths[0])
    for p in parameters:
        path = out / f"plotdata_{p}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PLOT_COLUMNS)
            for row in _plot_rows(records, p):
                w.writerow([_fmt(v) for v in row])
        paths.append(path)
    if outcomes:
        path = out / "replicates.csv"
        names = parameter_names(D_F, D_R)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["m", "replicate", "status"] + [f"{p}:{meth}" for meth in METHODS for p in names])
            for o in sorted(outcomes, key=lambda o: (o.m, o.replicate)):
                cells = [""] * (len(METHODS) * len(names)) if o.covered is None else [str(int(v)) for v in o.covered.ravel()]
                w.writerow([o.m, o.replicate, o.failure or "ok"] + cells)
        paths.append(path)
    manifest = {
        "config": config.to_dict() if config is not None else None,
        "seed": config.seed if config is not None else None,
        "rng": "Philox keyed by SeedSequence([seed, m, replicate])",
        "parameters": parameters,
        "warnings": [asdict(w) for w in alerts],
        "versions": {
            "glmm_asym": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(path)
    return paths
