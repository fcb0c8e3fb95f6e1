"""Maximum Laplace quasi-likelihood fitting and dispersion estimation."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .expfam import Family, get_family
from .model import (
    INNER_MAX_ITER,
    INNER_TOL,
    GlmmSpec,
    GroupedDataset,
    InnerModeError,
    _vech_indices,
    canonical_factor,
    factor_from_vech,
    laplace_eval,
    solve_modes,
)

BOUNDARY_EIG = 1e-8


class DispersionError(ValueError):
    pass


@dataclass
class FitOptions:
    tol: float = 1e-6
    max_iter: int = 1000
    inner_tol: float = INNER_TOL
    inner_max_iter: int = INNER_MAX_ITER
    polish: bool = True
    phi_tol: float = 1e-8
    phi_max_iter: int = 50

    @classmethod
    def from_mapping(cls, cfg: dict) -> "FitOptions":
        keys = {
            "optimizer.tol": ("tol", float),
            "optimizer.max_iter": ("max_iter", int),
            "inner.tol": ("inner_tol", float),
            "inner.max_iter": ("inner_max_iter", int),
        }
        kwargs = {}
        for k, v in cfg.items():
            if k in keys:
                name, conv = keys[k]
                kwargs[name] = conv(v)
        return cls(**kwargs)


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    sigma_hat: np.ndarray
    phi_hat: float
    u_star: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    d_R: int
    family: Family
    grad_norm: float = np.nan
    boundary: bool = False
    phi_boundary: bool = False
    message: str = ""
    evaluations: int = 0
    diagnostics: dict = field(default_factory=dict)

    @property
    def beta_A(self) -> np.ndarray:
        return self.beta_hat[: self.d_R]

    @property
    def beta_B(self) -> np.ndarray:
        return self.beta_hat[self.d_R :]

    @property
    def d_F(self) -> int:
        return self.beta_hat.size


# ---------------------------------------------------------------------------
# ordinary GLM by iteratively reweighted least squares


def _initial_mean(family: Family, y):
    if family.name == "bernoulli":
        return (y + 0.5) / 2.0
    if family.name == "poisson":
        return y + 0.1
    return y.copy()


def glm_fit(X, y, family, max_iter: int = 100, tol: float = 1e-12) -> np.ndarray:
    """Canonical-link GLM maximum likelihood by damped Newton (IRLS)."""
    family = get_family(family)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    mu = _initial_mean(family, y)
    eta = family.link(mu)
    w = family.variance_function(mu)
    z = eta + (y - mu) / w
    sw = np.sqrt(w)
    beta = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)[0]
    if family.name == "gamma" and np.any(X @ beta >= 0):
        beta = np.linalg.lstsq(X, -1.0 / np.full_like(y, y.mean()), rcond=None)[0]

    def objective(b):
        e = X @ b
        if family.name == "gamma" and np.any(e >= 0):
            return -np.inf
        return float(np.sum(y * e - family.b(e)))

    f = objective(beta)
    for _ in range(max_iter):
        eta = X @ beta
        g = X.T @ (y - family.b1(eta))
        H = X.T @ (family.b2(eta)[:, None] * X)
        step = np.linalg.solve(H, g)
        t = 1.0
        while t > 1e-10:
            f_new = objective(beta + t * step)
            if f_new >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        beta = beta + t * step
        f = f_new
        if np.max(np.abs(t * step)) < tol * (1 + np.max(np.abs(beta))):
            break
    return beta


# ---------------------------------------------------------------------------
# Laplace objective in unconstrained coordinates
#
# Sigma enters through the entries of its lower Cholesky factor without a sign
# or log constraint on the diagonal. Singular maximisers (a random-effect
# correlation of +-1, common with few observations per group) are then
# ordinary stationary points instead of limits at infinity.


class _Objective:
    def __init__(self, data: GroupedDataset, spec: GlmmSpec, phi: float, estimate_phi: bool, options: FitOptions):
        self.data = data
        self.spec = spec
        self.phi = phi
        self.estimate_phi = estimate_phi
        self.options = options
        self.v_cache = None
        self.evaluations = 0
        self.last = None

    def split(self, x):
        dF, dR = self.spec.d_F, self.spec.d_R
        beta = x[:dF]
        L = factor_from_vech(x[dF : dF + self.spec.q], dR)
        sigma = L @ L.T
        phi = math.exp(x[-1]) if self.estimate_phi else self.phi
        return beta, sigma, L, phi

    def evaluate(self, x):
        beta, sigma, L, phi = self.split(x)
        ev = laplace_eval(
            self.data,
            self.spec.family,
            self.spec.d_R,
            beta,
            phi=phi,
            gradient=True,
            inner_tol=self.options.inner_tol,
            inner_max_iter=self.options.inner_max_iter,
            factor=L,
            v0=self.v_cache,
        )
        rows, cols = _vech_indices(self.spec.d_R)
        grad = [ev.grad_beta, ev.grad_factor[rows, cols]]
        if self.estimate_phi:
            grad.append([ev.grad_phi * phi])
        return ev, np.concatenate(grad)

    def __call__(self, x):
        self.evaluations += 1
        try:
            ev, g = self.evaluate(x)
        except (InnerModeError, ValueError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf, np.zeros_like(x)
        if not (np.isfinite(ev.loglik) and np.all(np.isfinite(g))):
            return np.inf, np.zeros_like(x)
        self.v_cache = ev.modes.v
        self.last = (x.copy(), ev)
        return -ev.loglik, -g

    def gradient(self, x):
        return self(x)[1]

    def hessian(self, x, rel_step: float = 1e-5):
        """Central-difference Hessian of the analytic gradient (of -loglik)."""
        k = x.size
        Hm = np.empty((k, k))
        for j in range(k):
            h = rel_step * max(1.0, abs(x[j]))
            e = np.zeros(k)
            e[j] = h
            Hm[:, j] = (self.gradient(x + e) - self.gradient(x - e)) / (2 * h)
        return 0.5 * (Hm + Hm.T)


def _start_point(data: GroupedDataset, spec: GlmmSpec, phi: float, estimate_phi: bool):
    family = spec.family
    beta = glm_fit(data.X, data.y, family)
    if family.name == "gaussian":
        resid = data.y - data.X @ beta
        scale = max(np.var(resid), 1e-8)
        sigma = 0.25 * scale * np.eye(spec.d_R)
        phi0 = 0.5 * scale
    elif family.name == "gamma":
        eta = data.X @ beta
        sigma = 0.05 * np.mean(eta) ** 2 * np.eye(spec.d_R)
        mu = family.b1(eta)
        phi0 = max(np.mean((data.y - mu) ** 2 / mu**2), 1e-3)
    else:
        sigma = 0.5 * np.eye(spec.d_R)
        phi0 = phi
    rows, cols = _vech_indices(spec.d_R)
    x = [beta, np.linalg.cholesky(sigma)[rows, cols]]
    if estimate_phi:
        x.append([math.log(phi0)])
    return np.concatenate(x)


def _optimise(obj: _Objective, x0: np.ndarray, options: FitOptions):
    f0, g0 = obj(x0)
    if not np.isfinite(f0):
        raise RuntimeError("objective is not finite at the starting point")
    hess_inv0 = None
    H0 = obj.hessian(x0)
    try:
        np.linalg.cholesky(H0)
        hess_inv0 = np.linalg.inv(H0)
        hess_inv0 = 0.5 * (hess_inv0 + hess_inv0.T)
    except np.linalg.LinAlgError:
        hess_inv0 = np.diag(1.0 / np.maximum(np.abs(np.diag(H0)), 1.0))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(
            obj,
            x0,
            jac=True,
            method="BFGS",
            options={"gtol": options.tol, "maxiter": options.max_iter, "hess_inv0": hess_inv0},
        )
    x = res.x
    f, g = obj(x)
    iterations = int(res.nit)
    message = str(res.message)
    if options.polish and np.isfinite(f) and np.max(np.abs(g)) >= 0.1 * options.tol:
        for _ in range(20):
            if np.max(np.abs(g)) < 0.1 * options.tol:
                break
            H = obj.hessian(x)
            try:
                np.linalg.cholesky(H)
            except np.linalg.LinAlgError:
                break
            step = np.linalg.solve(H, g)
            t = 1.0
            improved = False
            while t > 1e-8:
                f_new, g_new = obj(x - t * step)
                if np.isfinite(f_new) and (f_new <= f + 1e-12 * abs(f) or np.max(np.abs(g_new)) < np.max(np.abs(g))):
                    improved = True
                    break
                t *= 0.5
            if not improved:
                break
            x, f, g = x - t * step, f_new, g_new
            iterations += 1
    return x, f, g, iterations, message


def pearson_dispersion(data: GroupedDataset, fit: FitResult, allow_zero: bool = False) -> float:
    """Pearson estimate sum (y - mu)^2 / V(mu) / (N - d_F) at the conditional modes."""
    family = get_family(fit.family)
    XA = data.X[:, : fit.d_R]
    eta = data.X @ fit.beta_hat + np.einsum("ij,ij->i", XA, fit.u_star[data.group_index])
    mu = family.b1(eta)
    V = family.variance_function(mu)
    bad = np.flatnonzero(~(V > 0))
    if bad.size:
        g = data.group_index[bad[0]]
        j = bad[0] - data.offsets[g]
        raise DispersionError(
            f"variance function is zero at observation {j} of group {data.group_ids[g]!r} (mu={mu[bad[0]]!r})"
        )
    dof = data.N - data.d_F
    if dof <= 0:
        raise DispersionError("not enough observations for a Pearson estimate")
    phi = float(np.sum((data.y - mu) ** 2 / V) / dof)
    if phi <= 0 and not allow_zero:
        raise DispersionError("Pearson dispersion estimate is zero (perfect fit)")
    return phi


def _make_result(obj: _Objective, x, f, g, iterations, message, tol) -> FitResult:
    beta, _, L, phi = obj.split(x)
    L = canonical_factor(L)
    sigma = L @ L.T
    ev = obj.last[1] if obj.last is not None and np.array_equal(obj.last[0], x) else obj.evaluate(x)[0]
    grad_norm = float(np.max(np.abs(g))) if np.all(np.isfinite(g)) else np.inf
    eig = np.linalg.eigvalsh(sigma)
    return FitResult(
        beta_hat=np.array(beta, dtype=float),
        sigma_hat=0.5 * (sigma + sigma.T),
        phi_hat=float(phi),
        u_star=ev.modes.u.copy(),
        loglik=float(-f),
        converged=bool(np.isfinite(f) and grad_norm < tol),
        iterations=iterations,
        d_R=obj.spec.d_R,
        family=obj.spec.family,
        grad_norm=grad_norm,
        boundary=bool(eig.min() < BOUNDARY_EIG),
        message=message,
        evaluations=obj.evaluations,
        diagnostics={"theta": x.copy(), "gradient": np.array(g, dtype=float), "factor": L},
    )


def fit(data: GroupedDataset, spec: GlmmSpec, options: FitOptions | None = None, start=None) -> FitResult:
    """Maximise the Laplace quasi-log-likelihood over (beta, Sigma[, phi])."""
    options = options or FitOptions()
    if data.m < 2:
        raise ValueError("fitting needs at least two groups")
    if data.d_F != spec.d_F:
        raise ValueError(f"data has {data.d_F} predictors, spec expects {spec.d_F}")
    spec.family.check_response(data.y)
    mode = spec.phi_mode
    estimate_phi = mode == "profile-mle"
    phi = spec.phi_value
    obj = _Objective(data, spec, phi, estimate_phi, options)
    x0 = _start_point(data, spec, phi, estimate_phi) if start is None else np.asarray(start, dtype=float)
    x, f, g, iters, msg = _optimise(obj, x0, options)
    result = _make_result(obj, x, f, g, iters, msg, options.tol)
    if mode != "pearson":
        return result

    total = iters
    phi_boundary = False
    for _ in range(options.phi_max_iter):
        try:
            new_phi = pearson_dispersion(data, result, allow_zero=True)
        except DispersionError:
            raise
        if new_phi <= 0:
            phi_boundary = True
            break
        if abs(new_phi - obj.phi) <= options.phi_tol * obj.phi:
            obj.phi = new_phi
            break
        obj.phi = new_phi
        if result.boundary:
            # L = 0 is a stationary point of the objective whatever phi is, so a
            # warm start there cannot leave the boundary once phi has changed
            x = x.copy()
            x[spec.d_F : spec.d_F + spec.q] = x0[spec.d_F : spec.d_F + spec.q]
        x, f, g, iters, msg = _optimise(obj, x, options)
        total += iters
        result = _make_result(obj, x, f, g, total, msg, options.tol)
    return FitResult(
        **{
            **result.__dict__,
            "phi_hat": float(obj.phi),
            "phi_boundary": phi_boundary,
            "iterations": total,
            "converged": result.converged and not phi_boundary,
        }
    )


def conditional_modes(data: GroupedDataset, fit_result: FitResult) -> np.ndarray:
    return solve_modes(
        data, fit_result.family, fit_result.d_R, fit_result.beta_hat, fit_result.phi_hat, fit_result.sigma_hat
    ).u
