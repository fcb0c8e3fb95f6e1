"""Brute-force checks of the per-group score expansions.

Notation for one group with design ``X = [X_A, X_B]``, responses ``y`` and
random effect ``u``:

* ``C(u) = -sum_j {y_j u'x_Aj - b(eta_j)}`` and the posterior density of ``u``
  is proportional to ``exp(-C(u)/phi - u' Sigma^{-1} u / 2)``;
* ``G_A, G_B`` are the residual sums ``sum_j (y_j - b'(eta_j)) x_j`` split by
  block, ``H_AA, H_AB, H_BB`` the ``b''``-weighted cross products and
  ``H3_AAA, H3_AAB`` the ``b'''``-weighted triple products, all at a given
  ``u`` (the true random effect in the expansions).

Exact scores are ratios of integrals over ``u`` computed by tensor
Gauss-Legendre quadrature on a box centred at the posterior mode; the
approximate scores are the closed-form large-n expansions built from the sums
above. Rate experiments regress ``log error`` on ``log n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate as sp_integrate
from scipy.optimize import minimize

from .expfam import get_family
from .integrate import QuadratureError
from .matcalc import duplication_matrix, star, vec
from .model import InnerModeError, inner_mode
from .simulation import Truth, generate_dataset

EXACT_ORDER = 80
EXACT_WIDTH = 8.0
EXACT_TOL = 1e-10
EDGE_LOG_DROP = -25.0


@dataclass(frozen=True)
class ScoreTriple:
    S_A: np.ndarray
    S_B: np.ndarray
    S_C: np.ndarray

    def __post_init__(self):
        for name in ("S_A", "S_B", "S_C"):
            v = np.array(getattr(self, name), dtype=float).ravel()
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, v)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.S_A, self.S_B, self.S_C])


@dataclass(frozen=True)
class GroupSums:
    G_A: np.ndarray
    G_B: np.ndarray
    H_AA: np.ndarray
    H_AB: np.ndarray
    H_BB: np.ndarray
    H3_AAA: np.ndarray
    H3_AAB: np.ndarray


def _split_group(group, d_R: int):
    X, y = group
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ValueError("group design and response lengths differ")
    if not 1 <= d_R <= X.shape[1]:
        raise ValueError(f"need 1 <= d_R <= {X.shape[1]}")
    return X, y


def group_sums(group, beta, u, family, d_R: int) -> GroupSums:
    """Residual, curvature and third-derivative sums of one group at ``u``."""
    family = get_family(family)
    X, y = _split_group(group, d_R)
    XA, XB = X[:, :d_R], X[:, d_R:]
    eta = X @ np.asarray(beta, dtype=float) + XA @ np.asarray(u, dtype=float)
    r = y - family.b1(eta)
    b2, b3 = family.b2(eta), family.b3(eta)
    return GroupSums(
        G_A=XA.T @ r,
        G_B=XB.T @ r,
        H_AA=(XA * b2[:, None]).T @ XA,
        H_AB=(XA * b2[:, None]).T @ XB,
        H_BB=(XB * b2[:, None]).T @ XB,
        H3_AAA=np.einsum("j,jr,js,jt->rst", b3, XA, XA, XA),
        H3_AAB=np.einsum("j,jr,js,jt->rst", b3, XA, XA, XB),
    )


def _spd_inverse(S, name: str) -> np.ndarray:
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if np.linalg.eigvalsh(0.5 * (S + S.T)).min() <= 0:
        raise ValueError(f"{name} must be positive definite")
    return np.linalg.inv(S)


def _vech_score(M, d: int) -> np.ndarray:
    """``D' vec(M) / 2`` for a square matrix ``M``."""
    return 0.5 * duplication_matrix(d).T @ vec(M)


# ---------------------------------------------------------------------------
# exact scores by quadrature


def _posterior_moments(X, y, beta, sigma, phi, family, d_R, order, width):
    Sinv = _spd_inverse(sigma, "Sigma")
    u_hat, _ = inner_mode((X, y), beta, phi, family, d_R, sigma=sigma)
    XA, XB = X[:, :d_R], X[:, d_R:]
    base = X @ beta

    def log_post(U):
        eta = base[None, :] + U @ XA.T
        return (eta @ y - family.b(eta).sum(axis=1)) / phi - 0.5 * np.einsum("ka,ab,kb->k", U, Sinv, U)

    eta_hat = base + XA @ u_hat
    A = (XA * family.b2(eta_hat)[:, None]).T @ XA / phi + Sinv
    C = np.linalg.cholesky(np.linalg.inv(A))
    top = log_post(u_hat[None, :])[0]
    # Skewed posteriors get a wider box until the log density at every face
    # has dropped by at least EDGE_LOG_DROP.
    for _ in range(8):
        faces = u_hat[None, :] + width * np.vstack([C.T, -C.T])
        if np.max(log_post(faces)) - top <= EDGE_LOG_DROP:
            break
        width *= 1.25
    else:
        raise QuadratureError(f"posterior mass reaches the edge of a {width:.3g}-SD box", order=order)

    t, w = np.polynomial.legendre.leggauss(order)
    grids = np.meshgrid(*([t] * d_R), indexing="ij")
    T = np.stack([g.ravel() for g in grids], axis=1)
    W = np.prod(np.stack(np.meshgrid(*([w] * d_R), indexing="ij")).reshape(d_R, -1), axis=0)
    U = u_hat[None, :] + width * T @ C.T
    lp = log_post(U)
    p = W * np.exp(lp - lp.max())
    p /= p.sum()
    eta = base[None, :] + U @ XA.T
    gB = (y[None, :] - family.b1(eta)) @ XB / phi
    return p @ U, np.einsum("k,ka,kb->ab", p, U, U), p @ gB, Sinv


def exact_scores(
    group,
    beta,
    sigma,
    phi: float,
    family,
    d_R: int,
    tol: float = EXACT_TOL,
    order: int = EXACT_ORDER,
    width: float = EXACT_WIDTH,
) -> ScoreTriple:
    """Scores of the group's marginal log-likelihood in (beta_A, beta_B, vech Sigma).

    ``S_A = Sigma^{-1} E(u|y)``, ``S_B = E{phi^{-1} X_B'(y - b'(eta)) | y}`` and
    ``S_C = D'vec(Sigma^{-1} {E(uu'|y) - Sigma} Sigma^{-1}) / 2``. Posterior
    moments come from a tensor Gauss-Legendre rule with ``order`` points per
    axis on a box of at least ``width`` posterior standard deviations; a rule of 3/4
    the order must agree to ``tol`` (relative to the score size).
    """
    family = get_family(family)
    X, y = _split_group(group, d_R)
    beta = np.asarray(beta, dtype=float)
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if d_R > 2:
        raise ValueError("direct quadrature is limited to d_R <= 2")
    if not phi > 0:
        raise ValueError("phi must be positive")

    def scores(k):
        m1, m2, gB, Sinv = _posterior_moments(X, y, beta, sigma, phi, family, d_R, k, width)
        return ScoreTriple(Sinv @ m1, gB, _vech_score(Sinv @ (m2 - sigma) @ Sinv, d_R))

    fine = scores(order)
    coarse = scores(max(8, (3 * order) // 4))
    a, b = fine.vector(), coarse.vector()
    gap = float(np.max(np.abs(a - b)) / max(1.0, np.max(np.abs(a))))
    if gap > tol:
        raise QuadratureError(f"exact-score quadrature did not settle (gap {gap:.3g})", gap=gap, order=order)
    return fine


# ---------------------------------------------------------------------------
# closed-form expansions


def approx_scores(group, beta, sigma, phi: float, family, d_R: int, u) -> ScoreTriple:
    """Large-n expansions of the three scores built from the sums at the true ``u``."""
    X, _ = _split_group(group, d_R)
    u = np.asarray(u, dtype=float).ravel()
    if u.size != d_R:
        raise ValueError(f"u must have length {d_R}")
    Sinv = _spd_inverse(sigma, "Sigma")
    s = group_sums(group, beta, u, family, d_R)
    if np.linalg.cond(s.H_AA) > 1e12:
        raise np.linalg.LinAlgError("H_AA is singular for this group")
    Hinv = np.linalg.inv(s.H_AA)
    a = Hinv @ s.G_A
    aa = np.outer(a, a)
    k_g = star(s.H3_AAA, aa)
    k_h = star(s.H3_AAA, Hinv)
    S_A = Sinv @ (u + a - 0.5 * Hinv @ k_g - phi * Hinv @ Sinv @ u - 0.5 * phi * Hinv @ k_h)
    if X.shape[1] > d_R:
        P = s.H_AB.T @ Hinv
        S_B = (
            (s.G_B - P @ s.G_A) / phi
            + P @ k_g / (2 * phi)
            - star(s.H3_AAB, aa) / (2 * phi)
            + P @ Sinv @ u
            - 0.5 * star(s.H3_AAB, Hinv)
            + 0.5 * P @ k_h
        )
    else:
        S_B = np.zeros(0)
    M = (
        np.outer(u, u)
        - np.linalg.inv(Sinv)
        + 2 * np.outer(a, u)
        + aa
        + phi * Hinv
        - 2 * phi * Hinv @ Sinv @ np.outer(u, u)
        - np.outer(Hinv @ k_g, u)
        - phi * np.outer(Hinv @ k_h, u)
    )
    S_C = _vech_score(Sinv @ M @ Sinv, d_R)
    return ScoreTriple(S_A, S_B, S_C)


def u_star_expansion_check(group, beta, u, family, d_R: int, phi: float = 1.0):
    """Newton minimiser of C versus its three-term expansion about the true ``u``.

    Returns ``(u_newton, u_three_term, gap)`` with the Euclidean ``gap``.
    """
    u = np.asarray(u, dtype=float).ravel()
    u_newton, _ = inner_mode(group, beta, phi, family, d_R, sigma=None, u0=u)
    s = group_sums(group, beta, u, family, d_R)
    Hinv = np.linalg.inv(s.H_AA)
    a = Hinv @ s.G_A
    u_three = u + a - 0.5 * Hinv @ star(s.H3_AAA, np.outer(a, a))
    return u_newton, u_three, float(np.linalg.norm(u_newton - u_three))


# ---------------------------------------------------------------------------
# integral-ratio expansion


def _fd_gradient(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    g = np.empty(x.size)
    for k in range(x.size):
        e = np.zeros(x.size)
        e[k] = h * max(1.0, abs(x[k]))
        g[k] = (f(x + e) - f(x - e)) / (2 * e[k])
    return g


def _fd_hessian(f, x, h=1e-4):
    x = np.asarray(x, dtype=float)
    d = x.size
    H = np.empty((d, d))
    f0 = f(x)
    steps = h * np.maximum(1.0, np.abs(x))
    for r in range(d):
        er = np.zeros(d)
        er[r] = steps[r]
        H[r, r] = (f(x + er) - 2 * f0 + f(x - er)) / steps[r] ** 2
        for s in range(r):
            es = np.zeros(d)
            es[s] = steps[s]
            H[r, s] = H[s, r] = (
                f(x + er + es) - f(x + er - es) - f(x - er + es) + f(x - er - es)
            ) / (4 * steps[r] * steps[s])
    return H


def _fd_third(hess, x, h=2e-3):
    x = np.asarray(x, dtype=float)
    d = x.size
    T = np.empty((d, d, d))
    for t in range(d):
        e = np.zeros(d)
        e[t] = h * max(1.0, abs(x[t]))
        T[:, :, t] = (hess(x + e) - hess(x - e)) / (2 * e[t])
    return 0.5 * (T + np.transpose(T, (1, 0, 2)))


@dataclass(frozen=True)
class MiyataTerms:
    value: float
    x_star: np.ndarray
    leading: float
    corrections: tuple


def miyata_terms(g, c, h, n: float, x0, grad_g=None, hess_g=None, grad_c=None, grad_h=None, hess_h=None, third_h=None):
    """Expansion of ``int g c exp(-n h) / int c exp(-n h)`` about the minimiser of ``h``.

    Derivatives not supplied are taken by central finite differences.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    d = x0.size
    if d > 2:
        raise ValueError("the ratio expansion is implemented for d <= 2")
    if not n > 0:
        raise ValueError("n must be positive")

    def scalar(f):
        return lambda x: float(f(x[0] if d == 1 else x))

    def shaped(f, shape):
        return lambda x: np.asarray(f(x[0] if d == 1 else x), dtype=float).reshape(shape)

    g1, c1, h1 = scalar(g), scalar(c), scalar(h)
    dg = shaped(grad_g, (d,)) if grad_g else (lambda x: _fd_gradient(g1, x))
    dc = shaped(grad_c, (d,)) if grad_c else (lambda x: _fd_gradient(c1, x))
    dh = shaped(grad_h, (d,)) if grad_h else (lambda x: _fd_gradient(h1, x))
    d2g = shaped(hess_g, (d, d)) if hess_g else (lambda x: _fd_hessian(g1, x))
    d2h = shaped(hess_h, (d, d)) if hess_h else (lambda x: _fd_hessian(h1, x))
    d3h = shaped(third_h, (d, d, d)) if third_h else (lambda x: _fd_third(d2h, x))

    x = minimize(h1, x0, jac=dh, method="BFGS", options={"gtol": 1e-10}).x
    for _ in range(20):
        step = np.linalg.solve(d2h(x), dh(x))
        x = x - step
        if np.max(np.abs(step)) <= 1e-14 * (1 + np.max(np.abs(x))):
            break
    Hh = d2h(x)
    if not np.all(np.isfinite(x)) or np.max(np.abs(dh(x))) > 1e-8 * max(1.0, np.max(np.abs(Hh))) or np.linalg.eigvalsh(Hh).min() <= 0:
        raise RuntimeError(f"no interior minimiser of h found near {x0}")
    Hinv = np.linalg.inv(Hh)
    gg = dg(x)
    c0 = c1(x)
    if c0 <= 0:
        raise ValueError("c must be positive at the minimiser")
    t1 = gg @ Hinv @ dc(x) / (n * c0)
    t2 = np.trace(Hinv @ d2g(x)) / (2 * n)
    t3 = -gg @ Hinv @ star(d3h(x), Hinv) / (2 * n)
    lead = g1(x)
    return MiyataTerms(float(lead + t1 + t2 + t3), x, lead, (float(t1), float(t2), float(t3)))


def miyata_ratio(g, c, h, n: float, x0=0.0, **derivatives) -> float:
    return miyata_terms(g, c, h, n, x0, **derivatives).value


def ratio_by_quadrature_1d(g, c, h, n: float, center: float = 0.0, half_width: float = 40.0) -> float:
    """Reference value of the 1-D integral ratio by adaptive quadrature in ``t = sqrt(n)(x - center)``."""
    s = 1.0 / np.sqrt(n)
    h0 = h(center)

    def weight(t):
        x = center + s * t
        return c(x) * np.exp(-n * (h(x) - h0))

    opts = dict(epsabs=0.0, epsrel=1e-13, limit=400, points=[0.0])
    num = sp_integrate.quad(lambda t: g(center + s * t) * weight(t), -half_width, half_width, **opts)[0]
    den = sp_integrate.quad(weight, -half_width, half_width, **opts)[0]
    return num / den


# ---------------------------------------------------------------------------
# rate experiments


def log_log_slope(ns, errors) -> float:
    """Ordinary least-squares slope of ``log(error)`` on ``log(n)``."""
    x = np.log(np.asarray(ns, dtype=float))
    y = np.log(np.asarray(errors, dtype=float))
    if x.size < 2 or not np.all(np.isfinite(y)):
        raise ValueError("need at least two positive errors")
    return float(np.polyfit(x, y, 1)[0])


@dataclass
class RateResult:
    name: str
    ns: list
    errors: list
    slope: float
    threshold: float
    replicates: int = 1
    skipped: int = 0
    notes: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.slope <= self.threshold)


def quartic_problem():
    """``g = x^2``, ``c = exp(-x^2/4)``, ``h = x^2/2 + x^4/8`` with analytic derivatives."""
    return dict(
        g=lambda x: x * x,
        c=lambda x: np.exp(-x * x / 4.0),
        h=lambda x: x * x / 2.0 + x**4 / 8.0,
        grad_g=lambda x: 2.0 * x,
        hess_g=lambda x: 2.0,
        grad_c=lambda x: -0.5 * x * np.exp(-x * x / 4.0),
        grad_h=lambda x: x + x**3 / 2.0,
        hess_h=lambda x: 1.0 + 1.5 * x * x,
        third_h=lambda x: 3.0 * x,
    )


def miyata_rate(ns=(16, 32, 64, 128, 256, 512, 1024), threshold: float = -1.8, analytic: bool = False) -> RateResult:
    prob = quartic_problem()
    g, c, h = prob.pop("g"), prob.pop("c"), prob.pop("h")
    derivs = prob if analytic else {}
    errs = [abs(miyata_ratio(g, c, h, n, 0.3, **derivs) - ratio_by_quadrature_1d(g, c, h, n)) for n in ns]
    return RateResult("miyata", list(ns), errs, log_log_slope(ns, errs), threshold)


def _groups(n: int, replicates: int, seed: int, truth: Truth, accept):
    """Yield ``(group, u)`` pairs; draws that ``accept`` rejects are skipped deterministically."""
    k = skipped = 0
    out = []
    while len(out) < replicates:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(n), k])))
        k += 1
        data, U = generate_dataset(1, n, truth, rng, return_effects=True)
        group = data.group(0)
        if accept(group, U[0]):
            out.append((group, U[0]))
        else:
            skipped += 1
        if skipped > 10 * replicates:
            raise RuntimeError(f"too many rejected groups at n={n}")
    return out, skipped


def _mode_exists(group, u, truth):
    try:
        inner_mode(group, truth.beta, 1.0, "bernoulli", 2, sigma=None, u0=u)
    except InnerModeError:
        return False
    return True


def u_star_rate(
    ns=(25, 50, 100, 200, 400), replicates: int = 50, seed: int = 1, threshold: float = -1.3
) -> RateResult:
    truth = Truth.default()
    errs, skipped = [], 0
    for n in ns:
        groups, sk = _groups(n, replicates, seed, truth, lambda g, u: _mode_exists(g, u, truth))
        skipped += sk
        errs.append(float(np.mean([u_star_expansion_check(g, truth.beta, u, "bernoulli", 2)[2] for g, u in groups])))
    return RateResult("u_star", list(ns), errs, log_log_slope(ns, errs), threshold, replicates, skipped)


@dataclass
class ScoreRates:
    S_A: RateResult
    S_B: RateResult
    S_C: RateResult
    details: dict = field(default_factory=dict)

    def results(self) -> list:
        return [self.S_A, self.S_B, self.S_C]


def score_rates(
    ns=(25, 50, 100, 200, 400),
    replicates: int = 50,
    seed: int = 2,
    thresholds=(-1.3, -0.4, -1.3),
) -> ScoreRates:
    """Mean ``|approx - exact|`` per score block over simulated logistic groups."""
    truth = Truth.default()
    phi = 1.0
    errs = {"S_A": [], "S_B": [], "S_C": []}
    skipped = 0
    for n in ns:
        groups, sk = _groups(n, replicates, seed, truth, lambda g, u: np.linalg.cond(group_sums(g, truth.beta, u, "bernoulli", 2).H_AA) < 1e8)
        skipped += sk
        per = {k: [] for k in errs}
        for g, u in groups:
            ex = exact_scores(g, truth.beta, truth.sigma, phi, "bernoulli", 2)
            ap = approx_scores(g, truth.beta, truth.sigma, phi, "bernoulli", 2, u)
            for k in errs:
                per[k].append(float(np.linalg.norm(getattr(ap, k) - getattr(ex, k))))
        for k in errs:
            errs[k].append(float(np.mean(per[k])))
    out = [
        RateResult(name, list(ns), errs[name], log_log_slope(ns, errs[name]), thr, replicates, skipped)
        for name, thr in zip(("S_A", "S_B", "S_C"), thresholds)
    ]
    return ScoreRates(*out)


# ---------------------------------------------------------------------------
# conditional moment identities


@dataclass(frozen=True)
class MomentCheck:
    name: str
    estimate: np.ndarray
    target: np.ndarray
    se: np.ndarray

    @property
    def max_z(self) -> float:
        se = np.where(self.se > 0, self.se, np.inf)
        z = np.abs(self.estimate - self.target) / se
        exact = (self.se == 0) & (self.estimate != self.target)
        return float(np.inf if np.any(exact) else np.max(z, initial=0.0))


def moment_checks(X, beta, u, family, d_R: int, phi: float, replicates: int, rng: np.random.Generator) -> list:
    """Monte Carlo over ``Y | X, U`` of the residual-sum moments against ``phi * H``."""
    family = get_family(family)
    X = np.atleast_2d(np.asarray(X, dtype=float))
    XA, XB = X[:, :d_R], X[:, d_R:]
    eta = X @ np.asarray(beta, dtype=float) + XA @ np.asarray(u, dtype=float)
    Y = family.sample(np.broadcast_to(eta, (replicates, eta.size)), rng, phi)
    R = Y - family.b1(eta)[None, :]
    GA, GB = R @ XA, R @ XB
    s = group_sums((X, family.mean(eta)), beta, u, family, d_R)

    def mc(name, samples, target):
        samples = samples.reshape(replicates, -1)
        est = samples.mean(axis=0)
        se = samples.std(axis=0, ddof=1) / np.sqrt(replicates)
        return MomentCheck(name, est, np.asarray(target, dtype=float).ravel(), se)

    out = [
        mc("E G_A", GA, np.zeros(d_R)),
        mc("E G_A G_A'", np.einsum("ka,kb->kab", GA, GA), phi * s.H_AA),
    ]
    if XB.shape[1]:
        out += [
            mc("E G_B", GB, np.zeros(XB.shape[1])),
            mc("E G_A G_B'", np.einsum("ka,kb->kab", GA, GB), phi * s.H_AB),
            mc("E G_B G_B'", np.einsum("ka,kb->kab", GB, GB), phi * s.H_BB),
        ]
    return out


# ---------------------------------------------------------------------------
# suite used by the command line


@dataclass(frozen=True)
class VerifyResult:
    name: str
    measured: float
    threshold: float
    passed: bool
    detail: str = ""


SUITES = ("miyata", "u_star", "scores", "moments", "all")


def run_suite(name: str = "all", replicates: int = 50, seed: int = 1) -> list:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {', '.join(SUITES)}")
    out = []

    def add_rate(r: RateResult):
        detail = " ".join(f"n={n}:{e:.3g}" for n, e in zip(r.ns, r.errors))
        out.append(VerifyResult(f"{r.name} slope", r.slope, r.threshold, r.passed, detail))

    if name in ("miyata", "all"):
        add_rate(miyata_rate())
    if name in ("u_star", "all"):
        add_rate(u_star_rate(replicates=replicates, seed=seed))
    if name in ("scores", "all"):
        for r in score_rates(replicates=replicates, seed=seed + 1).results():
            add_rate(r)
    if name in ("moments", "all"):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 12])))
        truth = Truth.default()
        for fam in ("gaussian", "bernoulli"):
            data, U = generate_dataset(1, 8, truth, rng, return_effects=True)
            for chk in moment_checks(data.X, truth.beta, U[0], fam, 2, 1.0, 20000, rng):
                out.append(VerifyResult(f"{fam} {chk.name} |z|", chk.max_z, 4.0, chk.max_z < 4.0))
    return out
