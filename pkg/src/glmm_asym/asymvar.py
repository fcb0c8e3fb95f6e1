"""Population-level asymptotic covariance of the GLMM estimators.

Everything here is anchored at one parameter point ``(beta, Sigma, phi)`` and
one law for the predictor vector ``X``, represented by weighted support
points (a large sample, a product quadrature grid, or the data themselves).

For ``u`` in R^{d_R} the Omega functions are

    Omega_AA(u)  = E{b''(eta(u)) X_A X_A'}
    Omega_AB(u)  = E{b''(eta(u)) X_A X_B'}
    Omega_BB(u)  = E{b''(eta(u)) X_B X_B'}
    Omega'_AAA(u)[r, s, t] = E{b'''(eta(u)) X_Ar X_As X_At}
    Omega'_AAB(u)[r, s, t] = E{b'''(eta(u)) X_Ar X_As X_Bt}

with ``eta(u) = (beta_A + u)'X_A + beta_B'X_B``. The psi vectors, Psi
matrices and the expectation matrices Lambda_AA, Lambda_AB, Phi, E{Psi6},
E{Psi8}, E{Psi9} built from them give the two-term covariances

    Cov(beta_hat)       ~ blockdiag(Sigma, 0)/m + phi/(mn) * Bracket^{-1}
    Cov(vech Sigma_hat) ~ 2 D+(Sigma x Sigma)D+'/m
                          + phi/(mn) * (2E{Psi9} - 4E{Psi8} + Phi' E{Psi6}^{-1} Phi).

Expectations over U ~ N(0, Sigma) whose integrands contain ``Sigma^{-1} U``
are evaluated after Gaussian integration by parts,
``E{(Sigma^{-1}U)_b h(U)} = E{d h / d u_b}``. The resulting integrands are
free of ``Sigma^{-1}`` so they stay finite for a singular Sigma, and they have
lower polynomial degree in ``u``. The literal integrands remain available via
``form="literal"``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss

from .expfam import Family, get_family
from .integrate import DEFAULT_TOL, gaussian_expectation, psd_factor
from .matcalc import ThreeArray, _vech_indices, duplication_pinv, kron_batched, vech_batched

CHUNK_ELEMENTS = 4_000_000
E6_COND_LIMIT = 1e10
LAMBDA_ASYMMETRY_TOL = 1e-8


class SingularOmegaError(ValueError):
    """Omega_AA(u) is numerically singular at some evaluation point."""

    def __init__(self, message, u=None):
        super().__init__(message)
        self.u = u


class CovarianceError(ValueError):
    """A matrix that must be inverted is singular or badly conditioned."""

    def __init__(self, message, condition=None, matrix=None):
        super().__init__(message)
        self.condition = condition
        self.matrix = matrix


# ---------------------------------------------------------------------------
# predictor law and anchored parameter point


@dataclass(frozen=True)
class PopulationModel:
    family: Family
    beta: np.ndarray
    sigma: np.ndarray
    phi: float
    d_R: int
    points: np.ndarray  # (N, d_F) support of the law of X
    weights: np.ndarray  # (N,) positive, summing to one
    source: str = "sample"
    mc_size: int | None = None
    seed: int | None = None
    factor: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        fam = get_family(self.family)
        beta = np.array(self.beta, dtype=float).ravel()
        sigma = np.atleast_2d(np.array(self.sigma, dtype=float))
        pts = np.atleast_2d(np.array(self.points, dtype=float))
        w = np.array(self.weights, dtype=float).ravel()
        d_R = int(self.d_R)
        if pts.shape[1] != beta.size:
            raise ValueError(f"points have {pts.shape[1]} columns but beta has length {beta.size}")
        if not 1 <= d_R <= beta.size:
            raise ValueError(f"d_R must lie in [1, {beta.size}], got {d_R}")
        if sigma.shape != (d_R, d_R):
            raise ValueError(f"sigma must be {d_R}x{d_R}, got {sigma.shape}")
        if w.size != pts.shape[0] or np.any(w < 0) or not np.isclose(w.sum(), 1.0, rtol=0, atol=1e-12):
            raise ValueError("weights must be non-negative, one per point, and sum to one")
        if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(beta)) and np.isfinite(self.phi)):
            raise ValueError("population inputs must be finite")
        if not self.phi > 0:
            raise ValueError("phi must be positive")
        L = psd_factor(sigma) if self.factor is None else np.atleast_2d(np.array(self.factor, dtype=float))
        for name, arr in (("beta", beta), ("sigma", sigma), ("points", pts), ("weights", w), ("factor", L)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "family", fam)
        object.__setattr__(self, "d_R", d_R)
        object.__setattr__(self, "phi", float(self.phi))

    @property
    def d_F(self) -> int:
        return self.beta.size

    @property
    def d_B(self) -> int:
        return self.d_F - self.d_R

    @property
    def q(self) -> int:
        return self.d_R * (self.d_R + 1) // 2

    @classmethod
    def from_sample(cls, X, family, beta, sigma, phi=1.0, d_R=None, weights=None, factor=None):
        """Empirical law of the rows of ``X`` (equal weights unless given)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        w = np.full(X.shape[0], 1.0 / X.shape[0]) if weights is None else np.asarray(weights, dtype=float)
        sigma = np.atleast_2d(sigma)
        d_R = sigma.shape[0] if d_R is None else d_R
        return cls(family, beta, sigma, phi, d_R, X, w, "sample", X.shape[0], None, factor)

    @classmethod
    def from_sampler(cls, sampler: Callable, family, beta, sigma, phi=1.0, d_R=None, size=200_000, seed=0):
        """Monte Carlo law: ``sampler(rng, size)`` returns a ``(size, d_F)`` array."""
        rng = np.random.default_rng(seed)
        X = np.asarray(sampler(rng, int(size)), dtype=float)
        sigma = np.atleast_2d(sigma)
        d_R = sigma.shape[0] if d_R is None else d_R
        return cls(family, beta, sigma, phi, d_R, X, np.full(X.shape[0], 1.0 / X.shape[0]), "monte-carlo", int(size), seed)

    @classmethod
    def uniform_design(cls, family, beta, sigma, phi=1.0, d_R=None, order=8, intercept=True):
        """X = (1, X_2, ..., X_dF) with independent U(0,1) entries, by Gauss-Legendre product rule."""
        beta = np.asarray(beta, dtype=float)
        k = beta.size - (1 if intercept else 0)
        X, w = uniform_product_rule(k, order)
        if intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        sigma = np.atleast_2d(sigma)
        d_R = sigma.shape[0] if d_R is None else d_R
        return cls(family, beta, sigma, phi, d_R, X, w, f"uniform-gl{order}")

    def at(self, beta=None, sigma=None, phi=None) -> "PopulationModel":
        """Same X law re-anchored at another parameter point."""
        return PopulationModel(
            self.family,
            self.beta if beta is None else beta,
            self.sigma if sigma is None else sigma,
            self.phi if phi is None else phi,
            self.d_R,
            self.points,
            self.weights,
            self.source,
            self.mc_size,
            self.seed,
        )


def uniform_product_rule(k: int, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre product rule on [0, 1]^k with weights summing to one."""
    if k == 0:
        return np.zeros((1, 0)), np.ones(1)
    z, w = leggauss(int(order))
    z = 0.5 * (z + 1.0)
    w = 0.5 * w
    pts = np.array(list(itertools.product(z, repeat=k)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=k))), axis=1)
    return pts, wts / wts.sum()


# ---------------------------------------------------------------------------
# Omega functions


@dataclass
class OmegaValues:
    """Omega quantities at K points; leading axis indexes the points."""

    AA: np.ndarray  # (K, R, R)
    AB: np.ndarray  # (K, R, B)
    BB: np.ndarray  # (K, B, B)
    AAA: np.ndarray  # (K, R, R, R)
    AAB: np.ndarray  # (K, R, R, B)

    def single(self, k: int = 0) -> dict:
        return {
            "AA": self.AA[k],
            "AB": self.AB[k],
            "BB": self.BB[k],
            "AAA": ThreeArray(self.AAA[k]),
            "AAB": ThreeArray(self.AAB[k]) if self.AAB.shape[-1] else None,
        }


class OmegaBundle:
    """Omega functions of a population model, evaluated in blocks of points."""

    def __init__(self, model: PopulationModel):
        self.model = model
        X = model.points
        R = model.d_R
        F = model.d_F
        self.base = X @ model.beta
        self.XA = np.ascontiguousarray(X[:, :R])
        self.F2 = np.einsum("na,nb->nab", X, X).reshape(X.shape[0], F * F)
        self.F3 = np.einsum("nr,ns,nt->nrst", self.XA, self.XA, X).reshape(X.shape[0], R * R * F)
        self.gaussian = model.family.name == "gaussian"

    @property
    def beta(self):
        return self.model.beta

    @property
    def sigma(self):
        return self.model.sigma

    def __call__(self, u) -> dict:
        u = np.asarray(u, dtype=float).reshape(1, self.model.d_R)
        return self.batch(u).single(0)

    def batch(self, U) -> OmegaValues:
        U = np.atleast_2d(np.asarray(U, dtype=float))
        m = self.model
        R, F, N = m.d_R, m.d_F, self.base.size
        K = U.shape[0]
        s2 = np.empty((K, F * F))
        s3 = np.empty((K, R * R * F))
        chunk = max(1, CHUNK_ELEMENTS // max(N, 1))
        w = m.weights
        for start in range(0, K, chunk):
            sl = slice(start, min(K, start + chunk))
            eta = self.base[None, :] + U[sl] @ self.XA.T
            s2[sl] = (m.family.b2(eta) * w) @ self.F2
            if self.gaussian:
                s3[sl] = 0.0
            else:
                s3[sl] = (m.family.b3(eta) * w) @ self.F3
        s2 = s2.reshape(K, F, F)
        s3 = s3.reshape(K, R, R, F)
        vals = OmegaValues(
            s2[:, :R, :R], s2[:, :R, R:], s2[:, R:, R:], s3[..., :R], s3[..., R:]
        )
        _check_omega(vals.AA, U)
        return vals


def _check_omega(AA, U):
    ev = np.linalg.eigvalsh(AA)
    bad = ~(ev[:, 0] > 1e-13 * np.maximum(ev[:, -1], np.finfo(float).tiny))
    if not bad.any():
        return
    k = int(np.flatnonzero(bad)[0])
    raise SingularOmegaError(f"Omega_AA(u) is numerically singular at u = {U[k].tolist()}", u=U[k].copy())


def omega_bundle(model: PopulationModel) -> OmegaBundle:
    return OmegaBundle(model)


# ---------------------------------------------------------------------------
# psi vectors and Psi matrices (pointwise, literal definitions)


def _sym(M):
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _dplus_vec(M):
    """D+ vec(M) for a stack of square matrices: vech of the symmetric part."""
    return vech_batched(_sym(M))


def _core(U, om: OmegaValues, sigma):
    R = U.shape[1]
    W = _sym(np.linalg.inv(om.AA))
    psi2 = np.einsum("krst,krs->kt", om.AAA, W)
    psi3 = np.einsum("krst,krs->kt", om.AAB, W)
    P5 = W @ om.AB
    P6 = _sym(om.BB - np.swapaxes(P5, -1, -2) @ om.AB)
    UU = np.einsum("ka,kb->kab", U, U)
    psi1 = vech_batched(np.asarray(sigma)[None] - UU)
    Dp = duplication_pinv(R)
    P8 = Dp @ kron_batched(UU, W) @ Dp.T
    return W, psi2, psi3, P5, P6, UU, psi1, P8


def _batch_psi(U, sigma, bundle):
    U = np.atleast_2d(np.asarray(U, dtype=float))
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    om = bundle.batch(U)
    W, psi2, psi3, P5, P6, UU, psi1, P8 = _core(U, om, sigma)
    Sinv = np.linalg.inv(sigma)
    inner = sigma[None] - UU - np.einsum("ab,kb,kc->kac", sigma, psi2, U)
    psi4 = _dplus_vec(W @ Sinv @ inner)
    P7 = UU @ Sinv @ W
    P9 = np.einsum("ka,kb->kab", psi1, psi4)
    P9 = P9 + np.swapaxes(P9, -1, -2)
    return dict(psi1=psi1, psi2=psi2, psi3=psi3, psi4=psi4, Psi5=P5, Psi6=P6, Psi7=P7, Psi8=P8, Psi9=P9)


def psi_vectors(u, sigma, bundle: OmegaBundle):
    """Return ``(psi1, psi2, psi3, psi4)`` at a single point ``u``."""
    out = _batch_psi(np.reshape(u, (1, -1)), sigma, bundle)
    return tuple(out[k][0] for k in ("psi1", "psi2", "psi3", "psi4"))


def psi_matrices(u, sigma, bundle: OmegaBundle):
    """Return ``(Psi5, Psi6, Psi7, Psi8, Psi9)`` at a single point ``u``."""
    out = _batch_psi(np.reshape(u, (1, -1)), sigma, bundle)
    return tuple(out[k][0] for k in ("Psi5", "Psi6", "Psi7", "Psi8", "Psi9"))


# ---------------------------------------------------------------------------
# expectation matrices


def _literal_integrands(U, om, sigma):
    W, psi2, psi3, P5, P6, UU, psi1, P8 = _core(U, om, sigma)
    Sinv = np.linalg.inv(sigma)
    SiU = U @ Sinv
    P7 = UU @ Sinv @ W
    Wp2 = np.einsum("kab,kb->ka", W, psi2)
    lam_aa = P7 + np.swapaxes(P7, -1, -2) - W + np.einsum("ka,kb->kab", Wp2, U)
    lam_aa = lam_aa + np.einsum("ka,kb->kab", U, Wp2)
    lam_ab = UU @ Sinv @ P5 + np.einsum("ka,kb,kbc->kac", U, psi2, P5) - np.einsum("ka,kc->kac", U, psi3)
    lead = np.einsum("kbc,kb->kc", P5, SiU + psi2) - psi3
    phi_m = np.einsum("kc,kl->kcl", lead, psi1)
    inner = sigma[None] - UU - np.einsum("ab,kb,kc->kac", sigma, psi2, U)
    psi4 = _dplus_vec(W @ Sinv @ inner)
    P9 = np.einsum("ka,kb->kab", psi1, psi4)
    P9 = P9 + np.swapaxes(P9, -1, -2)
    return dict(lam_aa=lam_aa, lam_ab=lam_ab, phi=phi_m, psi6=P6, psi8=P8, psi9=P9)


def _stein_integrands(U, om, sigma):
    W, psi2, psi3, P5, P6, UU, psi1, P8 = _core(U, om, sigma)
    R = U.shape[1]
    # divergences of W and Psi5 along u:  T_c = sum_b d_b W[b, c],
    # Rv_c = sum_b d_b Psi5[b, c], using d_b Omega_AA = Omega'_AAA[:, :, b]
    # and d_b Omega_AB = Omega'_AAB[b, :, :]
    T = -np.einsum("kbr,krsb,ksc->kc", W, om.AAA, W)
    Rv = np.einsum("kbr,kbrc->kc", W, om.AAB) - np.einsum("kbr,krsb,ksc->kc", W, om.AAA, P5)
    a = T + np.einsum("kab,kb->ka", W, psi2)
    lam_aa = W + np.einsum("ka,kb->kab", U, a) + np.einsum("ka,kb->kab", a, U)
    c = Rv + np.einsum("kbc,kb->kc", P5, psi2) - psi3
    lam_ab = P5 + np.einsum("ka,kc->kac", U, c)
    # Phi: c psi1' minus vech(p_c u' + u p_c') for each column p_c of Psi5
    pu = np.einsum("kac,kb->kcab", P5, U)
    phi_m = np.einsum("kc,kl->kcl", c, psi1) - vech_batched(pu + np.swapaxes(pu, -1, -2))
    # E{psi1 psi4'} after integrating the Sigma^{-1} u u' part of psi4 by parts
    au = vech_batched(_sym(np.einsum("ka,kb->kab", a, U)))
    Wu = np.einsum("kai,kj->kija", W, U)  # [i, j, a] = W[a, i] u_j
    G = Wu + np.swapaxes(Wu, 1, 2)  # W[a, i] u_j + u_i W[a, j]
    G = np.einsum("kija,kb->kijab", G, U)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    ri, ci = _vech_indices(R)
    G = G[:, ri, ci]  # (K, q, R, R)
    Q = -psi1[:, :, None] * au[:, None, :] + vech_batched(G)
    P9 = Q + np.swapaxes(Q, -1, -2)
    return dict(lam_aa=lam_aa, lam_ab=lam_ab, phi=phi_m, psi6=P6, psi8=P8, psi9=P9)


@dataclass
class ExpectationMatrices:
    lam_aa: np.ndarray  # (R, R)
    lam_ab: np.ndarray  # (R, B)
    phi: np.ndarray  # (B, q)
    e_psi6: np.ndarray  # (B, B)
    e_psi8: np.ndarray  # (q, q)
    e_psi9: np.ndarray  # (q, q)
    gap: float = 0.0
    order: int = 0


def expectation_matrices(
    model: PopulationModel | OmegaBundle,
    tol: float = DEFAULT_TOL,
    form: str = "stein",
    order: int | None = None,
) -> ExpectationMatrices:
    """Lambda_AA, Lambda_AB, Phi, E{Psi6}, E{Psi8}, E{Psi9} under U ~ N(0, Sigma)."""
    bundle = model if isinstance(model, OmegaBundle) else OmegaBundle(model)
    pm = bundle.model
    if pm.d_R > 3:
        raise ValueError("expectations are limited to d_R <= 3")
    sigma = pm.sigma
    if form == "stein":
        integrand = _stein_integrands
    elif form == "literal":
        integrand = _literal_integrands
    else:
        raise ValueError(f"unknown integrand form {form!r}")
    # a rank-deficient X law makes the bracket singular for every U; catching
    # it here avoids chasing quadrature convergence on an identically zero Psi6
    second = pm.points.T @ (pm.weights[:, None] * pm.points)
    cond = np.linalg.cond(second)
    if not np.isfinite(cond) or cond > E6_COND_LIMIT:
        raise CovarianceError(f"E(XX') is singular (condition number {cond:.3g}); the predictor law is degenerate",
                              condition=cond, matrix=second)

    def f(U):
        return integrand(U, bundle.batch(U), sigma)

    res = gaussian_expectation(f, sigma, tol=tol, order=order, full_output=True, factor=pm.factor)
    v = res.value
    lam = v["lam_aa"]
    scale = max(np.max(np.abs(lam)), np.finfo(float).tiny)
    asym = np.max(np.abs(lam - lam.T)) / scale
    if asym > LAMBDA_ASYMMETRY_TOL:
        raise CovarianceError(f"Lambda_AA is not symmetric (relative asymmetry {asym:.3g})", matrix=lam)
    return ExpectationMatrices(
        lam_aa=_sym(lam),
        lam_ab=v["lam_ab"],
        phi=v["phi"],
        e_psi6=_sym(v["psi6"]),
        e_psi8=_sym(v["psi8"]),
        e_psi9=_sym(v["psi9"]),
        gap=res.gap,
        order=res.order,
    )


# ---------------------------------------------------------------------------
# covariance assembly


@dataclass
class CovarianceReport:
    cov_beta_one_term: np.ndarray
    cov_beta_two_term: np.ndarray
    cov_vech_sigma_one_term: np.ndarray
    cov_vech_sigma_two_term: np.ndarray
    m: int
    n: float
    bracket_inverse: np.ndarray | None = None
    e_psi6_inverse: np.ndarray | None = None
    expectations: ExpectationMatrices | None = None


def _inverse_checked(M, name):
    if M.size == 0:
        return M.copy()
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > E6_COND_LIMIT:
        raise CovarianceError(f"{name} is singular or ill conditioned (condition number {cond:.3g})", condition=cond, matrix=M)
    return _sym(np.linalg.inv(M))


def bracket_inverse(lam_aa, lam_ab, e6_inv) -> np.ndarray:
    """Inverse of [[L^{-1}, L^{-1}Lab], [Lab'L^{-1}, Lab'L^{-1}Lab + E6]] by block algebra.

    With ``L = Lambda_AA`` the Schur complement of the (A,A) block is E{Psi6},
    which gives [[L + Lab E6^{-1} Lab', -Lab E6^{-1}], [-E6^{-1} Lab', E6^{-1}]]
    without forming ``L^{-1}``.
    """
    R = lam_aa.shape[0]
    B = e6_inv.shape[0]
    out = np.empty((R + B, R + B))
    G = lam_ab @ e6_inv
    out[:R, :R] = _sym(lam_aa + G @ lam_ab.T)
    out[:R, R:] = -G
    out[R:, :R] = -G.T
    out[R:, R:] = e6_inv
    return out


def bracket_matrix(lam_aa, lam_ab, e_psi6) -> np.ndarray:
    """The bracketed matrix itself (for checks; requires Lambda_AA invertible)."""
    Li = np.linalg.inv(lam_aa)
    top = np.hstack([Li, Li @ lam_ab])
    bottom = np.hstack([lam_ab.T @ Li, lam_ab.T @ Li @ lam_ab + e_psi6])
    return np.vstack([top, bottom])


def sigma_leading_cov(sigma) -> np.ndarray:
    """2 D+ (Sigma x Sigma) D+' (to be divided by m)."""
    sigma = np.atleast_2d(sigma)
    Dp = duplication_pinv(sigma.shape[0])
    return _sym(2.0 * Dp @ np.kron(sigma, sigma) @ Dp.T)


def assemble_covariances(E: ExpectationMatrices, sigma, phi: float, m, n) -> CovarianceReport:
    """Combine expectation matrices into one-term and two-term covariances."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if not (m > 0 and n > 0):
        raise ValueError("m and n must be positive")
    R = sigma.shape[0]
    B = E.e_psi6.shape[0]
    F = R + B
    mn = m * n
    e6_inv = _inverse_checked(E.e_psi6, "E{Psi6}")
    lead_beta = np.zeros((F, F))
    lead_beta[:R, :R] = sigma / m
    one_beta = lead_beta.copy()
    one_beta[R:, R:] = phi / mn * e6_inv
    if B:
        binv = bracket_inverse(E.lam_aa, E.lam_ab, e6_inv)
    else:
        binv = E.lam_aa.copy()
    two_beta = lead_beta + phi / mn * binv
    two_beta[R:, R:] = one_beta[R:, R:]
    lead_sigma = sigma_leading_cov(sigma) / m
    second = 2.0 * E.e_psi9 - 4.0 * E.e_psi8
    if B:
        second = second + E.phi.T @ e6_inv @ E.phi
    two_sigma = lead_sigma + phi / mn * _sym(second)
    return CovarianceReport(
        cov_beta_one_term=_sym(one_beta),
        cov_beta_two_term=_sym(two_beta),
        cov_vech_sigma_one_term=lead_sigma,
        cov_vech_sigma_two_term=_sym(two_sigma),
        m=m,
        n=n,
        bracket_inverse=binv,
        e_psi6_inverse=e6_inv,
        expectations=E,
    )


def two_term_covariances(model: PopulationModel, m, n, tol: float = DEFAULT_TOL) -> CovarianceReport:
    """One-term and two-term covariances of (beta_hat, vech Sigma_hat) at the model's truth."""
    if model.d_F < model.d_R:
        raise ValueError("d_F must be at least d_R")
    E = expectation_matrices(model, tol)
    return assemble_covariances(E, model.sigma, model.phi, m, n)


# ---------------------------------------------------------------------------
# closed forms


def gaussian_closed_form(sigma, phi: float, second_moment, m, n) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian-response two-term covariances from E(XX') alone.

    Returns ``(cov_beta, cov_vech_sigma)`` with second terms
    ``phi E(XX')^{-1}/(mn)`` and ``4 phi D+(Sigma x E(X_A X_A')^{-1})D+'/(mn)``.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    EXX = np.atleast_2d(np.asarray(second_moment, dtype=float))
    R = sigma.shape[0]
    F = EXX.shape[0]
    mn = m * n
    cov_beta = np.zeros((F, F))
    cov_beta[:R, :R] = sigma / m
    cov_beta = cov_beta + phi / mn * _sym(np.linalg.inv(EXX))
    Dp = duplication_pinv(R)
    WA = _sym(np.linalg.inv(EXX[:R, :R]))
    cov_sigma = sigma_leading_cov(sigma) / m + 4.0 * phi / mn * _sym(Dp @ np.kron(sigma, WA) @ Dp.T)
    return _sym(cov_beta), _sym(cov_sigma)


@dataclass(frozen=True)
class ExpMoments:
    """E(e^{b1 X}), E(X e^{b1 X}), E(X^2 e^{b1 X}) for a scalar predictor X."""

    e0: float
    e1: float
    e2: float

    @classmethod
    def uniform(cls, beta1: float, order: int = 60) -> "ExpMoments":
        z, w = leggauss(order)
        x = 0.5 * (z + 1.0)
        w = 0.5 * w
        f = np.exp(beta1 * x)
        return cls(float(w @ f), float(w @ (x * f)), float(w @ (x * x * f)))


def poisson_closed_form(beta0, beta1, sigma2, phi, moments, m, n, tol: float = 1e-12) -> np.ndarray:
    """Two-term Cov(beta_hat) for Poisson, random intercept, one slope predictor.

    ``moments`` is an ``ExpMoments`` (or a triple) at ``beta1``. With
    a1 = e^{b0 + s2/2}[E2 E0 - E1^2] and
    a2 = [e^{s2} E2 E0 + (1 - e^{s2}) E1^2] / E0 the result is
    [[s2, 0], [0, 0]]/m + phi/(a1 mn) [[a2, -E1], [-E1, E0]].
    """
    if not isinstance(moments, ExpMoments):
        moments = ExpMoments(*map(float, moments))
    e0, e1, e2 = moments.e0, moments.e1, moments.e2
    spread = e2 * e0 - e1 * e1
    if not spread > tol * max(e2 * e0, np.finfo(float).tiny):
        raise CovarianceError("degenerate predictor law: E2 E0 - E1^2 vanishes (a1 = 0)", condition=np.inf)
    a1 = np.exp(beta0 + sigma2 / 2.0) * spread
    es = np.exp(sigma2)
    a2 = (es * e2 * e0 + (1.0 - es) * e1 * e1) / e0
    lead = np.array([[sigma2, 0.0], [0.0, 0.0]]) / m
    return lead + phi / (a1 * m * n) * np.array([[a2, -e1], [-e1, e0]])
