"""Gauss-Hermite tensor quadrature for expectations under N(0, Sigma).

``gaussian_expectation`` evaluates E{f(U)}, U ~ N(0, Sigma), for integrands
returning arrays (or dicts of arrays). The integrand is called once per
quadrature rule with a ``(K, d)`` block of nodes and must return arrays with
leading axis ``K``. The order per dimension is doubled until two successive
rules agree to ``tol`` in the max-relative sense.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

DEFAULT_ORDERS = {1: 21, 2: 15, 3: 9}
DEFAULT_TOL = 1e-8
MAX_DOUBLINGS = 2


class QuadratureError(RuntimeError):
    """Raised when successive rules still disagree at the maximum order."""

    def __init__(self, message, estimate=None, gap=None, order=None):
        super().__init__(message)
        self.estimate = estimate
        self.gap = gap
        self.order = order


@dataclass(frozen=True)
class QuadratureRule:
    order_per_dim: int
    points: np.ndarray  # (K, d) nodes after the affine map u = L z
    weights: np.ndarray  # (K,), sum to one

    @property
    def size(self) -> int:
        return self.weights.size


@lru_cache(maxsize=64)
def _standard_rule(order: int, d: int) -> tuple[np.ndarray, np.ndarray]:
    z, w = hermegauss(order)
    w = w / w.sum()
    pts = np.array(list(itertools.product(z, repeat=d)))
    wts = np.prod(np.array(list(itertools.product(w, repeat=d))), axis=1)
    pts.flags.writeable = False
    wts.flags.writeable = False
    return pts, wts


def spd_cholesky(sigma) -> np.ndarray:
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ValueError(f"covariance must be square, got shape {sigma.shape}")
    if not np.all(np.isfinite(sigma)):
        raise ValueError("covariance has non-finite entries")
    scale = max(np.max(np.abs(sigma)), np.finfo(float).tiny)
    if np.max(np.abs(sigma - sigma.T)) > 1e-10 * scale:
        raise ValueError("covariance is not symmetric")
    try:
        return np.linalg.cholesky(0.5 * (sigma + sigma.T))
    except np.linalg.LinAlgError:
        raise ValueError("covariance is not positive definite") from None


def psd_factor(sigma) -> np.ndarray:
    """Lower factor L with L L' = sigma for a symmetric PSD (possibly singular) matrix."""
    try:
        return spd_cholesky(sigma)
    except ValueError as exc:
        if "not positive definite" not in str(exc):
            raise
    sigma = np.atleast_2d(np.asarray(sigma, dtype=float))
    vals, vecs = np.linalg.eigh(0.5 * (sigma + sigma.T))
    if vals.min() < -1e-10 * max(vals.max(), 1.0):
        raise ValueError("covariance is not positive semi-definite")
    root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    _, r = np.linalg.qr(root.T)
    return (r * np.where(np.diag(r) < 0, -1.0, 1.0)[:, None]).T


def gauss_hermite_rule(sigma, order: int, factor=None) -> QuadratureRule:
    L = spd_cholesky(sigma) if factor is None else np.atleast_2d(np.asarray(factor, dtype=float))
    d = L.shape[0]
    z, w = _standard_rule(int(order), d)
    return QuadratureRule(int(order), z @ L.T, w.copy())


def _weighted(w, v):
    v = np.asarray(v, dtype=float)
    return np.tensordot(w, v, axes=(0, 0)), np.tensordot(w, np.abs(v), axes=(0, 0))


def _apply(f, rule: QuadratureRule):
    """Return the rule's estimates of E{f} and E{|f|}."""
    vals = f(rule.points)
    w = rule.weights
    if isinstance(vals, dict):
        pairs = {k: _weighted(w, v) for k, v in vals.items()}
        return {k: p[0] for k, p in pairs.items()}, {k: p[1] for k, p in pairs.items()}
    return _weighted(w, vals)


def _max_relative_gap(a, b, scale=None) -> float:
    """max|a - b| relative to the largest entry of ``b`` (or of ``scale`` if larger).

    Passing E{|f|} as ``scale`` keeps the criterion meaningful for entries
    whose expectation vanishes through cancellation.
    """
    if isinstance(a, dict):
        return max(_max_relative_gap(a[k], b[k], None if scale is None else scale[k]) for k in a)
    a = np.asarray(a)
    b = np.asarray(b)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        return np.inf
    ref = np.max(np.abs(b), initial=0.0)
    if scale is not None:
        ref = max(ref, np.max(np.asarray(scale), initial=0.0))
    return float(np.max(np.abs(a - b), initial=0.0) / max(ref, np.finfo(float).tiny))


def vectorize_pointwise(f: Callable) -> Callable:
    """Wrap a single-node integrand so it accepts a ``(K, d)`` block."""

    def block(points):
        outs = [f(p) for p in points]
        if isinstance(outs[0], dict):
            return {k: np.stack([np.asarray(o[k], dtype=float) for o in outs]) for k in outs[0]}
        return np.stack([np.asarray(o, dtype=float) for o in outs])

    return block


@dataclass
class ExpectationResult:
    value: object
    gap: float
    order: int
    evaluations: int


def gaussian_expectation(
    f: Callable,
    sigma,
    tol: float = DEFAULT_TOL,
    order: int | None = None,
    max_doublings: int = MAX_DOUBLINGS,
    vectorized: bool = True,
    full_output: bool = False,
    factor=None,
):
    """Approximate E{f(U)} for U ~ N(0, sigma) by Gauss-Hermite tensor rules.

    Starting from ``order`` nodes per dimension (21, 15, 9 for d = 1, 2, 3)
    the order is doubled until successive estimates differ by less than
    ``tol`` relative to the largest entry of E{|f|} (which is the largest
    entry of E{f} for integrands of one sign), at most ``max_doublings``
    times.
    A lower factor with ``factor @ factor.T == sigma`` may be passed instead
    of ``sigma``; it may be singular, giving a degenerate normal law.
    """
    L = spd_cholesky(sigma) if factor is None else np.atleast_2d(np.asarray(factor, dtype=float))
    d = L.shape[0]
    if d > 3:
        raise ValueError("tensor Gauss-Hermite rules are limited to dimension <= 3")
    if not vectorized:
        f = vectorize_pointwise(f)
    q = int(order or DEFAULT_ORDERS[d])
    prev, _ = _apply(f, gauss_hermite_rule(sigma, q, L))
    evaluations = q**d
    gap = np.inf
    for _ in range(max_doublings):
        q *= 2
        cur, mag = _apply(f, gauss_hermite_rule(sigma, q, L))
        evaluations += q**d
        gap = _max_relative_gap(prev, cur, mag)
        prev = cur
        if gap < tol:
            break
    if not gap < tol:
        raise QuadratureError(
            f"quadrature did not reach tolerance {tol:g} (gap {gap:.3g} at order {q})",
            estimate=prev,
            gap=gap,
            order=q,
        )
    if full_output:
        return ExpectationResult(prev, gap, q, evaluations)
    return prev
