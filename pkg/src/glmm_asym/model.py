"""Two-level GLMM data structures, conditional modes and the Laplace objective.

The model has natural parameter ``eta_ij = (beta + [u_i; 0])' x_ij`` so that
the first ``d_R`` columns of the design (``x_A``) carry a random effect and
the remaining ``d_B = d_F - d_R`` columns (``x_B``) are fixed only.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expfam import Family, get_family
from .integrate import psd_factor
from .matcalc import _vech_indices

INNER_TOL = 1e-10
INNER_MAX_ITER = 50


class InnerModeError(RuntimeError):
    def __init__(self, message, u=None, groups=None):
        super().__init__(message)
        self.u = u
        self.groups = groups


PHI_MODES = ("fixed", "pearson", "profile-mle")


@dataclass(frozen=True)
class GlmmSpec:
    family: Family
    d_F: int
    d_R: int
    phi_mode: str = "default"
    phi_value: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", get_family(self.family))
        if not 1 <= self.d_R <= self.d_F:
            raise ValueError(f"need 1 <= d_R <= d_F, got d_R={self.d_R}, d_F={self.d_F}")
        mode = self.phi_mode
        if mode == "default":
            mode = "pearson" if self.family.dispersion_fixed else "profile-mle"
        if mode not in PHI_MODES:
            raise ValueError(f"phi mode must be one of {PHI_MODES}, got {mode!r}")
        if mode == "profile-mle" and self.family.name not in ("gaussian", "gamma"):
            raise ValueError("profile-mle dispersion needs a family with a d(y, phi) term")
        if not self.phi_value > 0:
            raise ValueError("dispersion must be positive")
        object.__setattr__(self, "phi_mode", mode)

    @property
    def d_B(self) -> int:
        return self.d_F - self.d_R

    @property
    def q(self) -> int:
        return self.d_R * (self.d_R + 1) // 2


def parse_phi_mode(text: str) -> tuple[str, float]:
    """Parse ``pearson``, ``profile-mle``, ``fixed`` or ``fixed(<value>)``."""
    t = text.strip().lower()
    if t.startswith("fixed"):
        rest = t[len("fixed"):].strip(" ():=")
        return "fixed", float(rest) if rest else 1.0
    if t in ("pearson", "profile-mle", "default"):
        return t, 1.0
    raise ValueError(f"unrecognised dispersion mode {text!r}")


@dataclass(frozen=True)
class GroupedDataset:
    """Rows stored contiguously by group; ``offsets[i]:offsets[i+1]`` is group i."""

    X: np.ndarray
    y: np.ndarray
    offsets: np.ndarray
    group_ids: tuple = field(default=None)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        y = np.array(self.y, dtype=float).ravel()
        off = np.array(self.offsets, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] != y.size:
            raise ValueError("X must be (N, d_F) with one row per response")
        if off.ndim != 1 or off.size < 2 or off[0] != 0 or off[-1] != y.size:
            raise ValueError("offsets must run from 0 to N")
        if np.any(np.diff(off) < 1):
            raise ValueError("every group needs at least one observation")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError("data must be finite")
        ids = self.group_ids
        if ids is None:
            ids = tuple(range(off.size - 1))
        ids = tuple(ids)
        if len(ids) != off.size - 1:
            raise ValueError("need one id per group")
        for a in (X, y, off):
            a.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "offsets", off)
        object.__setattr__(self, "group_ids", ids)

    @classmethod
    def from_groups(cls, groups, ids=None) -> "GroupedDataset":
        Xs, ys = [], []
        for Xi, yi in groups:
            Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
            Xs.append(Xi)
            ys.append(np.asarray(yi, dtype=float).ravel())
        sizes = [len(v) for v in ys]
        off = np.concatenate([[0], np.cumsum(sizes)])
        return cls(np.vstack(Xs), np.concatenate(ys), off, ids)

    @classmethod
    def from_arrays(cls, group, y, X) -> "GroupedDataset":
        """Group rows by label, keeping groups in order of first appearance."""
        group = np.asarray(group)
        labels, first, inverse = np.unique(group, return_index=True, return_inverse=True)
        rank = np.empty(labels.size, dtype=np.int64)
        rank[np.argsort(first, kind="stable")] = np.arange(labels.size)
        g = rank[inverse.ravel()]
        order = np.argsort(g, kind="stable")
        counts = np.bincount(g, minlength=labels.size)
        off = np.concatenate([[0], np.cumsum(counts)])
        ids = tuple(labels[np.argsort(rank)].tolist())
        return cls(np.asarray(X, dtype=float)[order], np.asarray(y, dtype=float)[order], off, ids)

    @property
    def m(self) -> int:
        return self.offsets.size - 1

    @property
    def N(self) -> int:
        return self.y.size

    @property
    def n(self) -> float:
        """Average group size."""
        return self.N / self.m

    @property
    def d_F(self) -> int:
        return self.X.shape[1]

    @property
    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def group_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.m), self.sizes)

    def group(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.offsets[i], self.offsets[i + 1]
        return self.X[s:e], self.y[s:e]

    def take_groups(self, order) -> "GroupedDataset":
        return GroupedDataset.from_groups([self.group(i) for i in order], [self.group_ids[i] for i in order])

    def to_csv(self, path) -> None:
        path = Path(path)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "y"] + [f"x{k + 1}" for k in range(self.d_F)])
            for gi, (s, e) in enumerate(zip(self.offsets[:-1], self.offsets[1:])):
                for r in range(s, e):
                    w.writerow([self.group_ids[gi], repr(float(self.y[r]))] + [repr(float(v)) for v in self.X[r]])

    @classmethod
    def from_csv(cls, path) -> "GroupedDataset":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if len(header) < 3 or header[0] != "group" or header[1] != "y":
                raise ValueError("header must be: group,y,x1,...,xK")
            gid, ys, xs = [], [], []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != len(header):
                    raise ValueError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
                if any(v.strip() == "" for v in row):
                    raise ValueError(f"line {lineno}: missing value")
                gid.append(row[0].strip())
                ys.append(float(row[1]))
                xs.append([float(v) for v in row[2:]])
        if not ys:
            raise ValueError("data file has no rows")
        return cls.from_arrays(np.array(gid), np.array(ys), np.array(xs))


def segment_sum(a: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.add.reduceat(a, offsets[:-1], axis=0)


# ---------------------------------------------------------------------------
# conditional modes


@dataclass
class ModeResult:
    u: np.ndarray  # (m, d_R)
    hessian: np.ndarray  # (m, d_R, d_R): sum_j b''(eta) x_A x_A'
    eta: np.ndarray  # (N,) natural parameter at the modes
    iterations: int
    v: np.ndarray | None = None  # (m, d_R) spherical coordinates, u = L v


def _newton_modes(family, base, y, Z, off, gid, ridge, w0, tol, max_iter):
    """Minimise sum_j {b(base + z'w) - y z'w} + ridge/2 |w|^2 for every group."""
    m = off.size - 1
    k = Z.shape[1]
    w = np.zeros((m, k)) if w0 is None else np.array(w0, dtype=float).reshape(m, k)
    outer = np.einsum("ia,ib->iab", Z, Z)
    eye = np.eye(k)

    def objective(eta, w):
        row = family.b(eta) - y * np.einsum("ij,ij->i", Z, w[gid])
        return segment_sum(row, off) + 0.5 * ridge * np.einsum("ia,ia->i", w, w)

    def state(w):
        eta = base + np.einsum("ij,ij->i", Z, w[gid])
        family.check_natural(eta)
        g = segment_sum((family.b1(eta) - y)[:, None] * Z, off) + ridge * w
        H = segment_sum(family.b2(eta)[:, None, None] * outer, off) + ridge * eye
        return eta, g, H

    def gscale(w):
        # at a penalised mode the data gradient is balanced by the penalty, so
        # the attainable accuracy is relative to the size of either term
        return 1.0 + ridge * np.max(np.abs(w), axis=1)

    eta, g, H = state(w)
    active = np.ones(m, dtype=bool)
    it = 0
    while True:
        gmax = np.max(np.abs(g), axis=1)
        active &= ~(gmax < tol * gscale(w))
        if not active.any():
            break
        if it >= max_iter:
            raise InnerModeError(
                f"conditional mode did not converge in {max_iter} Newton steps "
                f"(max gradient {gmax[active].max():.3g})",
                u=w.copy(),
                groups=np.flatnonzero(active),
            )
        it += 1
        idx = np.flatnonzero(active)
        try:
            step = np.linalg.solve(H[idx], g[idx][..., None])[..., 0]
        except np.linalg.LinAlgError:
            raise InnerModeError("singular Hessian in conditional mode search", u=w.copy(), groups=idx) from None
        f_old = objective(eta, w)[idx]
        t = np.ones(idx.size)
        pending = np.ones(idx.size, dtype=bool)
        w_new = w.copy()
        for _ in range(40):
            w_new[idx[pending]] = w[idx[pending]] - t[pending, None] * step[pending]
            try:
                eta_try = base + np.einsum("ij,ij->i", Z, w_new[gid])
                family.check_natural(eta_try)
                ok = objective(eta_try, w_new)[idx] <= f_old + 1e-12 * np.abs(f_old)
            except ValueError:
                ok = np.zeros(idx.size, dtype=bool)
            pending &= ~ok
            if not pending.any():
                break
            t[pending] *= 0.5
        # steps that cannot improve the objective are at roundoff level
        tiny = np.max(np.abs(t[:, None] * step), axis=1) <= 1e-13 * (1.0 + np.max(np.abs(w[idx]), axis=1))
        if pending.any():
            w_new[idx[pending]] = w[idx[pending]]
            stuck = pending & ~tiny
            if stuck.any():
                raise InnerModeError("line search failed in conditional mode search", u=w.copy(), groups=idx[stuck])
        w = w_new
        eta, g, H = state(w)
        active[idx[tiny]] = False
    return w, eta, it


def solve_modes(
    data: GroupedDataset,
    family: Family,
    d_R: int,
    beta,
    phi: float = 1.0,
    sigma=None,
    u0=None,
    tol: float = INNER_TOL,
    max_iter: int = INNER_MAX_ITER,
    factor=None,
    v0=None,
) -> ModeResult:
    """Damped Newton for all group modes at once.

    With ``sigma`` (or its Cholesky ``factor`` L) given, each group minimises
    ``C_i(u) + phi/2 u' sigma^{-1} u`` where
    ``C_i(u) = -sum_j {y_ij u'x_Aij - b(eta_ij)}``; this is the conditional
    (posterior) mode used by the Laplace approximation. The search runs in the
    coordinates ``u = L v``, which stay well conditioned when sigma is close
    to singular. Without ``sigma`` the unpenalised minimiser of ``C_i`` is
    returned.
    """
    family = get_family(family)
    beta = np.asarray(beta, dtype=float)
    X, y, off = data.X, data.y, data.offsets
    XA = X[:, :d_R]
    gid = data.group_index
    base = X @ beta
    penalised = sigma is not None or factor is not None
    if penalised:
        L = psd_factor(sigma) if factor is None else np.atleast_2d(np.asarray(factor, dtype=float))
        if v0 is None and u0 is not None:
            v0 = np.linalg.lstsq(L, np.asarray(u0, dtype=float).reshape(-1, d_R).T, rcond=None)[0].T
        v, eta, it = _newton_modes(family, base, y, XA @ L, off, gid, phi, v0, tol, max_iter)
        u = v @ L.T
    else:
        v = None
        u, eta, it = _newton_modes(family, base, y, XA, off, gid, 0.0, u0, tol, max_iter)
    H = segment_sum(family.b2(eta)[:, None, None] * np.einsum("ia,ib->iab", XA, XA), off)
    return ModeResult(u, H, eta, it, v)


def inner_mode(
    group,
    beta,
    phi: float,
    family,
    d_R: int,
    sigma=None,
    u0=None,
    tol: float = INNER_TOL,
    max_iter: int = INNER_MAX_ITER,
) -> tuple[np.ndarray, np.ndarray]:
    """Mode of a single group; returns ``(u_star, H_AA(u_star))``."""
    Xi, yi = group
    ds = GroupedDataset.from_groups([(Xi, yi)])
    res = solve_modes(ds, family, d_R, beta, phi, sigma, None if u0 is None else np.atleast_2d(u0), tol, max_iter)
    return res.u[0], res.hessian[0]


# ---------------------------------------------------------------------------
# Cholesky parametrisations of Sigma


def pack_sigma(sigma) -> np.ndarray:
    """Log-Cholesky coordinates: vech of L with the diagonal on the log scale."""
    L = np.linalg.cholesky(np.atleast_2d(sigma))
    d = L.shape[0]
    rows, cols = _vech_indices(d)
    theta = L[rows, cols].copy()
    theta[rows == cols] = np.log(theta[rows == cols])
    return theta


def unpack_sigma(theta, d: int) -> tuple[np.ndarray, np.ndarray]:
    theta = np.asarray(theta, dtype=float)
    rows, cols = _vech_indices(d)
    L = np.zeros((d, d))
    vals = theta.copy()
    diag = rows == cols
    vals[diag] = np.exp(vals[diag])
    L[rows, cols] = vals
    return L @ L.T, L


def sigma_grad_to_theta(G: np.ndarray, L: np.ndarray) -> np.ndarray:
    """Chain rule from a symmetric gradient dl/dSigma to log-Cholesky coordinates."""
    d = L.shape[0]
    rows, cols = _vech_indices(d)
    gL = 2.0 * G @ L
    out = gL[rows, cols].copy()
    diag = rows == cols
    out[diag] *= L[rows[diag], cols[diag]]
    return out


def factor_from_vech(theta, d: int) -> np.ndarray:
    """Lower-triangular factor from its column-major vech (no sign constraint)."""
    rows, cols = _vech_indices(d)
    L = np.zeros((d, d))
    L[rows, cols] = np.asarray(theta, dtype=float)
    return L


def canonical_factor(L) -> np.ndarray:
    """Flip column signs so the diagonal is non-negative; L L' is unchanged."""
    L = np.array(L, dtype=float)
    return L * np.where(np.diag(L) < 0, -1.0, 1.0)[None, :]


# ---------------------------------------------------------------------------
# Laplace quasi-log-likelihood


@dataclass
class LaplaceEval:
    loglik: float
    modes: ModeResult
    grad_beta: np.ndarray | None = None
    grad_factor: np.ndarray | None = None  # dl/dL, lower triangular
    grad_phi: float | None = None
    group_loglik: np.ndarray | None = None



def laplace_eval(
    data: GroupedDataset,
    family,
    d_R: int,
    beta,
    sigma=None,
    phi: float = 1.0,
    u0=None,
    gradient: bool = False,
    inner_tol: float = INNER_TOL,
    inner_max_iter: int = INNER_MAX_ITER,
    factor=None,
    v0=None,
) -> LaplaceEval:
    """Laplace approximation to the marginal quasi-log-likelihood.

    In spherical coordinates ``u = L v`` with ``Sigma = L L'`` each group
    contributes ``sum_j q_ij(v_hat) - |v_hat|^2 / 2 - log|I + L'H L/phi| / 2``,
    which equals the usual Laplace expression whenever Sigma is non-singular
    and stays finite on the boundary. With ``gradient=True`` the derivatives
    with respect to beta, the lower-triangular factor L and phi are attached.
    """
    family = get_family(family)
    beta = np.asarray(beta, dtype=float)
    if factor is None:
        if sigma is None:
            raise ValueError("either sigma or its factor is required")
        L = psd_factor(sigma)
    else:
        L = np.atleast_2d(np.asarray(factor, dtype=float))
    X, y, off = data.X, data.y, data.offsets
    XA = X[:, :d_R]
    gid = data.group_index
    modes = solve_modes(data, family, d_R, beta, phi, None, u0, inner_tol, inner_max_iter, factor=L, v0=v0)
    v, H, eta = modes.v, modes.hessian, modes.eta
    LHL = np.einsum("ba,ibc,cd->iad", L, H, L)
    B = np.eye(d_R) + LHL / phi
    sign, logdetB = np.linalg.slogdet(B)
    if np.any(sign <= 0):
        raise ValueError("non positive-definite curvature in Laplace approximation")
    rowll = family.quasi_loglik(y, eta, phi)
    per_group = segment_sum(rowll, off) - 0.5 * np.einsum("ia,ia->i", v, v) - 0.5 * logdetB
    out = LaplaceEval(math.fsum(per_group.tolist()), modes, group_loglik=per_group)
    if not gradient:
        return out

    Binv = np.linalg.inv(B)
    Ainv = np.einsum("ab,ibc,dc->iad", L, Binv, L)  # (H/phi + Sigma^{-1})^{-1}
    b2 = family.b2(eta)
    b3 = family.b3(eta)
    qj = np.einsum("ja,jab,jb->j", XA, Ainv[gid], XA)
    w = 0.5 / phi * b3 * qj
    s = segment_sum(w[:, None] * XA, off)
    p = np.einsum("iab,ib->ia", Binv, s @ L)  # B^{-1} L's
    z = p @ L.T  # A^{-1} s
    resid = y - family.b1(eta)
    r = segment_sum(resid[:, None] * XA, off)
    zx = np.einsum("ja,ja->j", XA, z[gid])
    out.grad_beta = X.T @ (resid / phi - w + b2 * zx / phi)
    Hz = np.einsum("iab,ib->ia", H, z)
    HLBinv = np.einsum("iab,bc,icd->iad", H, L, Binv)
    gL = (
        np.einsum("ia,ib->ab", r / phi - s + Hz / phi, v)
        - np.einsum("ia,ib->ab", r, p) / phi
        - HLBinv.sum(axis=0) / phi
    )
    out.grad_factor = np.tril(gL)
    direct = -(y * eta - family.b(eta) + family.c(y)) / phi**2 + family.d_dphi(y, phi)
    out.grad_phi = float(
        direct.sum()
        + 0.5 / phi**2 * np.einsum("iab,iba->", Binv, LHL)
        + np.einsum("ia,ia->", p, v) / phi
    )
    return out


def laplace_quasi_loglik(beta, sigma, phi, data: GroupedDataset, family, d_R: int | None = None, u0=None) -> float:
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    d_R = sigma.shape[0] if d_R is None else d_R
    return laplace_eval(data, family, d_R, beta, sigma, phi, u0).loglik
