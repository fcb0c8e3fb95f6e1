"""Plug-in (studentized) covariance estimates and confidence intervals.

The population machinery of ``asymvar`` is reused with the law of X replaced
by the empirical distribution of the design rows (weights 1/(mn)) and the
truth replaced by the fitted ``(beta_hat, Sigma_hat, phi_hat)``. Expectations
over U are taken under N(0, Sigma_hat).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .asymvar import (
    CovarianceError,
    CovarianceReport,
    ExpectationMatrices,
    OmegaBundle,
    PopulationModel,
    assemble_covariances,
    expectation_matrices,
)
from .fitting import FitResult
from .integrate import DEFAULT_TOL
from .matcalc import ThreeArray, _vech_indices
from .model import GroupedDataset

QUANTITIES = ("Psi6", "Psi8", "Psi9", "Lambda_AA", "Lambda_AB", "Phi")
METHODS = ("one-term", "two-term")


class IndefiniteCovarianceError(CovarianceError):
    """A two-term covariance estimate has a non-positive diagonal entry."""


def sample_population(fit: FitResult, data: GroupedDataset) -> PopulationModel:
    """Empirical X law anchored at the fitted parameters."""
    factor = fit.diagnostics.get("factor") if fit.diagnostics else None
    return PopulationModel.from_sample(
        data.X, fit.family, fit.beta_hat, fit.sigma_hat, fit.phi_hat, fit.d_R, factor=factor
    )


def _bundle(fit, data) -> OmegaBundle:
    if data.d_F != fit.d_F:
        raise ValueError(f"data has {data.d_F} predictors but the fit has {fit.d_F}")
    return OmegaBundle(sample_population(fit, data))


def omega_hats(u, fit: FitResult, data: GroupedDataset) -> dict:
    """Sample Omega_AA, Omega_AB, Omega_BB at ``u``: (mn)^{-1} sums of b'' x x'."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != fit.d_R:
        raise ValueError(f"u must have length {fit.d_R}")
    vals = _bundle(fit, data).batch(u[None, :])
    return {"AA": vals.AA[0], "AB": vals.AB[0], "BB": vals.BB[0]}


def omega_hat_primes(u, fit: FitResult, data: GroupedDataset) -> dict:
    """Sample Omega'_AAA and Omega'_AAB at ``u`` (b''' weighted triple products)."""
    u = np.asarray(u, dtype=float).ravel()
    if u.size != fit.d_R:
        raise ValueError(f"u must have length {fit.d_R}")
    vals = _bundle(fit, data).batch(u[None, :])
    out = {"AAA": ThreeArray(vals.AAA[0])}
    out["AAB"] = ThreeArray(vals.AAB[0]) if vals.AAB.shape[-1] else None
    return out


def e_hat_all(fit: FitResult, data: GroupedDataset, tol: float = DEFAULT_TOL) -> ExpectationMatrices:
    return expectation_matrices(_bundle(fit, data), tol)


def e_hat(fit: FitResult, data: GroupedDataset, quantity: str, tol: float = DEFAULT_TOL) -> np.ndarray:
    """One plug-in expectation matrix, named as in ``QUANTITIES``."""
    key = {
        "Psi6": "e_psi6",
        "Psi8": "e_psi8",
        "Psi9": "e_psi9",
        "Lambda_AA": "lam_aa",
        "Lambda_AB": "lam_ab",
        "Phi": "phi",
    }.get(quantity)
    if key is None:
        raise ValueError(f"unknown quantity {quantity!r}; choose from {', '.join(QUANTITIES)}")
    return getattr(e_hat_all(fit, data, tol), key)


def parameter_names(d_F: int, d_R: int) -> list[str]:
    names = [f"beta{k}" for k in range(d_F)]
    rows, cols = _vech_indices(d_R)
    names += [f"sigma{j + 1}{i + 1}" for i, j in zip(rows, cols)]
    return names


@dataclass(frozen=True)
class Interval:
    parameter: str
    estimate: float
    lower: float
    upper: float
    se: float
    method: str
    alpha: float

    def covers(self, value: float) -> bool:
        return bool(self.lower <= value <= self.upper)


@dataclass
class StudentizedReport:
    asy_cov_beta: np.ndarray
    asy_cov_vech_sigma: np.ndarray
    one_term_cov_beta: np.ndarray
    one_term_cov_vech_sigma: np.ndarray
    estimates: np.ndarray
    names: list
    covariance: CovarianceReport | None = None
    intervals: list = field(default_factory=list)

    def standard_errors(self, method: str) -> np.ndarray:
        if method == "two-term":
            diag = np.concatenate([np.diag(self.asy_cov_beta), np.diag(self.asy_cov_vech_sigma)])
        elif method == "one-term":
            diag = np.concatenate([np.diag(self.one_term_cov_beta), np.diag(self.one_term_cov_vech_sigma)])
        else:
            raise ValueError(f"unknown method {method!r}")
        return np.sqrt(np.clip(diag, 0.0, None))

    def interval(self, parameter: str, method: str) -> Interval:
        for iv in self.intervals:
            if iv.parameter == parameter and iv.method == method:
                return iv
        raise KeyError((parameter, method))


def asy_cov_estimates(fit: FitResult, data: GroupedDataset, tol: float = DEFAULT_TOL) -> StudentizedReport:
    """Plug-in two-term covariances of beta_hat and vech(Sigma_hat), with one-term comparators."""
    E = e_hat_all(fit, data, tol)
    cov = assemble_covariances(E, fit.sigma_hat, fit.phi_hat, data.m, data.n)
    for name, M in (("beta", cov.cov_beta_two_term), ("vech(Sigma)", cov.cov_vech_sigma_two_term)):
        d = np.diag(M)
        if not np.all(d > 0):
            k = int(np.flatnonzero(~(d > 0))[0])
            raise IndefiniteCovarianceError(
                f"two-term covariance of {name} has non-positive diagonal entry {k} ({d[k]:.3g}); "
                "the sample is too small for the expansion",
                matrix=M,
            )
    rows, cols = _vech_indices(fit.d_R)
    est = np.concatenate([fit.beta_hat, fit.sigma_hat[rows, cols]])
    return StudentizedReport(
        asy_cov_beta=cov.cov_beta_two_term,
        asy_cov_vech_sigma=cov.cov_vech_sigma_two_term,
        one_term_cov_beta=cov.cov_beta_one_term,
        one_term_cov_vech_sigma=cov.cov_vech_sigma_one_term,
        estimates=est,
        names=parameter_names(fit.d_F, fit.d_R),
        covariance=cov,
    )


def normal_quantile(p: float) -> float:
    return float(ndtri(p))


def confidence_intervals(
    fit: FitResult,
    data: GroupedDataset,
    alpha: float = 0.05,
    report: StudentizedReport | None = None,
    tol: float = DEFAULT_TOL,
) -> StudentizedReport:
    """Normal-theory intervals estimate +- z_{1-alpha/2} SE for both covariance approximations."""
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie strictly between 0 and 1, got {alpha!r}")
    report = report or asy_cov_estimates(fit, data, tol)
    z = normal_quantile(1.0 - alpha / 2.0)
    out = []
    for method in METHODS:
        se = report.standard_errors(method)
        for name, est, s in zip(report.names, report.estimates, se):
            half = z * s
            out.append(Interval(name, float(est), float(est - half), float(est + half), float(s), method, alpha))
    report.intervals = out
    return report
