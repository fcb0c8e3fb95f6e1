"""Matrix-calculus primitives.

Conventions used throughout the package:

* ``vec`` stacks columns (column-major / Fortran order).
* ``vech`` stacks the columns of the lower triangle, diagonal included, so
  ``vech([[a, b], [b, c]]) == [a, b, c]``.
* ``D_d`` (duplication) satisfies ``D_d @ vech(A) == vec(A)`` for symmetric A,
  ``K_d`` (commutation) satisfies ``K_d @ vec(B) == vec(B.T)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

SYMMETRY_RTOL = 1e-10


class DimensionError(ValueError):
    """Raised on non-conformable or wrongly sized inputs."""


def _check_order(d: int) -> int:
    if int(d) != d or d < 1:
        raise ValueError(f"matrix order must be a positive integer, got {d!r}")
    return int(d)


def vec(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2:
        raise DimensionError(f"vec expects a 2-d array, got shape {A.shape}")
    return A.reshape(-1, order="F")


def vec_inv(b, d: int) -> np.ndarray:
    b = np.asarray(b, dtype=float).ravel()
    d = _check_order(d)
    if b.size != d * d:
        raise DimensionError(f"vec_inv needs length {d * d}, got {b.size}")
    return b.reshape((d, d), order="F")


def vech(A) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionError(f"vech expects a square matrix, got shape {A.shape}")
    scale = max(np.max(np.abs(A), initial=0.0), np.finfo(float).tiny)
    if np.max(np.abs(A - A.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise ValueError("vech input is not symmetric")
    rows, cols = _vech_indices(A.shape[0])
    return A[rows, cols]


def vech_inv(v, d: int | None = None) -> np.ndarray:
    """Rebuild the symmetric matrix whose half-vectorisation is ``v``."""
    v = np.asarray(v, dtype=float).ravel()
    if d is None:
        d = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    d = _check_order(d)
    if v.size != d * (d + 1) // 2:
        raise DimensionError(f"vech_inv needs length {d * (d + 1) // 2}, got {v.size}")
    rows, cols = _vech_indices(d)
    A = np.zeros((d, d))
    A[rows, cols] = v
    A[cols, rows] = v
    return A


@lru_cache(maxsize=None)
def _vech_indices(d: int) -> tuple[np.ndarray, np.ndarray]:
    # column-major walk over the lower triangle
    rows, cols = [], []
    for j in range(d):
        for i in range(j, d):
            rows.append(i)
            cols.append(j)
    return np.array(rows), np.array(cols)


@lru_cache(maxsize=None)
def _duplication(d: int) -> np.ndarray:
    D = np.zeros((d * d, d * (d + 1) // 2))
    for k, (i, j) in enumerate(zip(*_vech_indices(d))):
        D[j * d + i, k] = 1.0
        D[i * d + j, k] = 1.0
    D.flags.writeable = False
    return D


def duplication_matrix(d: int) -> np.ndarray:
    return _duplication(_check_order(d)).copy()


@lru_cache(maxsize=None)
def _commutation(d: int) -> np.ndarray:
    K = np.zeros((d * d, d * d))
    for i in range(d):
        for j in range(d):
            # vec(B)[j*d + i] = B[i, j] = vec(B.T)[i*d + j]
            K[i * d + j, j * d + i] = 1.0
    K.flags.writeable = False
    return K


def commutation_matrix(d: int) -> np.ndarray:
    return _commutation(_check_order(d)).copy()


@lru_cache(maxsize=None)
def _duplication_pinv(d: int) -> np.ndarray:
    D = _duplication(d)
    P = np.linalg.solve(D.T @ D, D.T)
    P.flags.writeable = False
    return P


def duplication_pinv(d: int) -> np.ndarray:
    """Moore-Penrose inverse ``(D'D)^{-1} D'`` of the duplication matrix."""
    return _duplication_pinv(_check_order(d)).copy()


@dataclass(frozen=True)
class ThreeArray:
    """Dense ``d1 x d2 x d3`` array with entries indexed ``[r, s, t]``."""

    entries: np.ndarray

    def __post_init__(self):
        a = np.array(self.entries, dtype=float)
        if a.ndim != 3 or min(a.shape) < 1:
            raise DimensionError(f"ThreeArray needs three positive dims, got {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValueError("ThreeArray entries must be finite")
        a.flags.writeable = False
        object.__setattr__(self, "entries", a)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.entries.shape

    def star(self, M) -> np.ndarray:
        return star(self, M)


def star(A, M) -> np.ndarray:
    """Contract a 3-array with a matrix over its first two indices.

    Returns the vector with ``t``-th entry ``sum_{r,s} A[r, s, t] * M[r, s]``.
    Leading batch axes on plain ndarray inputs are broadcast, so ``A`` of shape
    ``(K, d1, d2, d3)`` with ``M`` of shape ``(K, d1, d2)`` gives ``(K, d3)``.
    """
    a = A.entries if isinstance(A, ThreeArray) else np.asarray(A, dtype=float)
    M = np.asarray(M, dtype=float)
    if a.ndim < 3 or M.ndim < 2 or a.shape[-3:-1] != M.shape[-2:]:
        raise DimensionError(f"cannot contract array {a.shape} with matrix {M.shape}")
    return np.einsum("...rst,...rs->...t", a, M)


def kron_batched(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Kronecker product over a shared leading batch axis."""
    K, p, q = A.shape
    _, r, s = B.shape
    return np.einsum("kij,kab->kiajb", A, B).reshape(K, p * r, q * s)


def vec_batched(M: np.ndarray) -> np.ndarray:
    """Column-major vec of each matrix in a ``(K, p, q)`` stack."""
    return np.swapaxes(M, -1, -2).reshape(*M.shape[:-2], -1)


def vech_batched(M: np.ndarray) -> np.ndarray:
    rows, cols = _vech_indices(M.shape[-1])
    return M[..., rows, cols]
