"""Exponential-family response distributions with canonical links.

A family is described through its cumulant function ``b`` and the terms
``c(y)`` and ``d(y, phi)`` of the quasi-likelihood

    {y * eta - b(eta) + c(y)} / phi + d(y, phi).

Only the first three derivatives of ``b`` are needed by the covariance
formulas. ``c`` and ``d`` are used for evaluating the fitting objective.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import digamma, expit, gammaln

FAMILY_NAMES = ("gaussian", "bernoulli", "poisson", "gamma")


class DomainError(ValueError):
    """Argument outside the natural-parameter or mean domain."""


def _gauss_b(eta, order):
    if order == 0:
        return 0.5 * eta**2
    if order == 1:
        return eta.copy()
    if order == 2:
        return np.ones_like(eta)
    return np.zeros_like(eta)


def _bern_b(eta, order):
    if order == 0:
        return np.logaddexp(0.0, eta)
    p = expit(eta)
    if order == 1:
        return p
    q = expit(-eta)
    if order == 2:
        return p * q
    return p * q * (q - p)


def _pois_b(eta, order):
    return np.exp(eta)


def _gamma_b(eta, order):
    if np.any(eta >= 0):
        raise DomainError("gamma natural parameter must be negative")
    if order == 0:
        return -np.log(-eta)
    if order == 1:
        return -1.0 / eta
    if order == 2:
        return 1.0 / eta**2
    return -2.0 / eta**3


@dataclass(frozen=True)
class Family:
    name: str
    dispersion_fixed: bool
    _b: Callable = None
    _mean_inverse: Callable = None
    _variance: Callable = None

    def cumulant(self, eta, order: int = 0):
        """Return ``b``, ``b'``, ``b''`` or ``b'''`` at ``eta`` (order 0..3)."""
        if order not in (0, 1, 2, 3):
            raise ValueError(f"cumulant derivatives above order 3 are unsupported (got {order})")
        arr = np.asarray(eta, dtype=float)
        out = self._b(arr, order)
        return float(out) if np.ndim(eta) == 0 else out

    def b(self, eta):
        return self.cumulant(eta, 0)

    def b1(self, eta):
        return self.cumulant(eta, 1)

    def b2(self, eta):
        return self.cumulant(eta, 2)

    def b3(self, eta):
        return self.cumulant(eta, 3)

    def mean(self, eta):
        return self.cumulant(eta, 1)

    def link(self, mu):
        """Canonical link, the inverse of ``b'``."""
        mu = np.asarray(mu, dtype=float)
        self._check_mean(mu)
        return self._mean_inverse(mu)

    def variance_function(self, mu):
        mu_arr = np.asarray(mu, dtype=float)
        self._check_mean(mu_arr)
        out = self._variance(mu_arr)
        return float(out) if np.ndim(mu) == 0 else out

    def _check_mean(self, mu):
        if not np.all(np.isfinite(mu)):
            raise DomainError("mean must be finite")
        if self.name == "bernoulli" and np.any((mu < 0) | (mu > 1)):
            raise DomainError("bernoulli mean must lie in [0, 1]")
        if self.name == "poisson" and np.any(mu < 0):
            raise DomainError("poisson mean must be non-negative")
        if self.name == "gamma" and np.any(mu <= 0):
            raise DomainError("gamma mean must be positive")

    def check_natural(self, eta):
        eta = np.asarray(eta, dtype=float)
        if not np.all(np.isfinite(eta)):
            raise DomainError("natural parameter must be finite")
        if self.name == "gamma" and np.any(eta >= 0):
            raise DomainError("gamma natural parameter must be negative")

    def check_response(self, y):
        y = np.asarray(y, dtype=float)
        if self.name == "bernoulli" and not np.all((y == 0) | (y == 1)):
            raise DomainError("bernoulli responses must be 0 or 1")
        if self.name == "poisson" and (np.any(y < 0) or np.any(y != np.round(y))):
            raise DomainError("poisson responses must be non-negative integers")
        if self.name == "gamma" and np.any(y <= 0):
            raise DomainError("gamma responses must be positive")

    # terms of the quasi-likelihood that do not involve eta

    def c(self, y):
        y = np.asarray(y, dtype=float)
        if self.name == "gaussian":
            return -0.5 * y**2
        if self.name == "poisson":
            return -gammaln(y + 1.0)
        if self.name == "gamma":
            return np.log(y)
        return np.zeros_like(y)

    def d(self, y, phi: float):
        y = np.asarray(y, dtype=float)
        if self.name == "gaussian":
            return np.full_like(y, -0.5 * np.log(2 * np.pi * phi))
        if self.name == "gamma":
            return -np.log(y) - np.log(phi) / phi - gammaln(1.0 / phi)
        return np.zeros_like(y)

    def d_dphi(self, y, phi: float):
        """Derivative of ``d(y, phi)`` with respect to ``phi``."""
        y = np.asarray(y, dtype=float)
        if self.name == "gaussian":
            return np.full_like(y, -0.5 / phi)
        if self.name == "gamma":
            return np.full_like(y, (np.log(phi) - 1.0 + digamma(1.0 / phi)) / phi**2)
        return np.zeros_like(y)

    def quasi_loglik(self, y, eta, phi: float = 1.0):
        """Elementwise ``{y eta - b(eta) + c(y)}/phi + d(y, phi)``."""
        y = np.asarray(y, dtype=float)
        eta = np.asarray(eta, dtype=float)
        return (y * eta - self.b(eta) + self.c(y)) / phi + self.d(y, phi)

    def sample(self, eta, rng: np.random.Generator, phi: float = 1.0):
        eta = np.asarray(eta, dtype=float)
        mu = self.mean(eta)
        if self.name == "gaussian":
            return rng.normal(mu, np.sqrt(phi))
        if self.name == "bernoulli":
            return (rng.random(eta.shape) < mu).astype(float)
        if self.name == "poisson":
            return rng.poisson(mu).astype(float)
        shape = 1.0 / phi
        return rng.gamma(shape, mu / shape)


GAUSSIAN = Family(
    "gaussian", False, _gauss_b, lambda mu: mu, lambda mu: np.ones_like(mu)
)
BERNOULLI = Family(
    "bernoulli",
    True,
    _bern_b,
    lambda mu: np.log(mu) - np.log1p(-mu),
    lambda mu: mu * (1.0 - mu),
)
POISSON = Family("poisson", True, _pois_b, np.log, lambda mu: mu)
GAMMA = Family("gamma", False, _gamma_b, lambda mu: -1.0 / mu, lambda mu: mu**2)

_REGISTRY = {f.name: f for f in (GAUSSIAN, BERNOULLI, POISSON, GAMMA)}


def get_family(name) -> Family:
    if isinstance(name, Family):
        return name
    try:
        return _REGISTRY[str(name).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown family {name!r}; choose from {', '.join(FAMILY_NAMES)}") from None


def cumulant(family, eta, order: int = 0):
    return get_family(family).cumulant(eta, order)


def variance_function(family, mu):
    return get_family(family).variance_function(mu)

