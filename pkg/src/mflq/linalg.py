"""Vectorization, half-vectorization and least squares for quadratic parameter fits."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg as sla

from .errors import DimensionError, RankDeficient
from .model import SYM_TOL

RANK_RTOL = 1e-8


def vec(M):
    """Stack the columns of `M`: ``vec(M)[i + p*j] == M[i, j]``."""
    M = np.asarray(M, dtype=float)
    if M.ndim == 1:
        return M.copy()
    return M.reshape(-1, order="F")


def unvec(v, shape):
    return np.asarray(v, dtype=float).reshape(shape, order="F")


def _lower_index(n):
    """(i, j) pairs with i >= j, column by column."""
    return [(i, j) for j in range(n) for i in range(j, n)]


def vec_plus(P, tol=SYM_TOL):
    """Half-vectorization of a symmetric matrix with doubled off-diagonals.

    Entries are the diagonal-and-below part of each column, taken left to
    right, so ``[[a, b], [b, c]] -> (a, 2b, c)``.
    """
    P = np.asarray(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise DimensionError(f"vec_plus needs a square matrix, got shape {P.shape}")
    norm = np.linalg.norm(P)
    if norm > 0 and np.linalg.norm(P - P.T) > tol * norm:
        raise DimensionError("vec_plus needs a symmetric matrix")
    return np.array([P[i, j] if i == j else 2.0 * P[i, j] for i, j in _lower_index(P.shape[0])])


def from_vec_plus(v, n):
    """Inverse of :func:`vec_plus`."""
    v = np.asarray(v, dtype=float)
    if v.shape != (n * (n + 1) // 2,):
        raise DimensionError(f"expected {n * (n + 1) // 2} entries for n={n}, got {v.shape}")
    P = np.zeros((n, n))
    for k, (i, j) in enumerate(_lower_index(n)):
        if i == j:
            P[i, i] = v[k]
        else:
            P[i, j] = P[j, i] = 0.5 * v[k]
    return P


@dataclass(frozen=True)
class DuplicationMatrix:
    """``T`` with ``vec(P) == T @ vec_plus(P)`` for every symmetric ``P``.

    Because :func:`vec_plus` doubles the off-diagonal entries, the
    off-diagonal columns of ``T`` carry 1/2 rather than 1.
    """

    n: int
    T: np.ndarray

    @property
    def dim(self):
        return self.n * (self.n + 1) // 2


@lru_cache(maxsize=None)
def _duplication(n):
    index = {pair: k for k, pair in enumerate(_lower_index(n))}
    T = np.zeros((n * n, len(index)))
    for j in range(n):
        for i in range(n):
            lo, hi = max(i, j), min(i, j)
            T[i + n * j, index[(lo, hi)]] = 1.0 if i == j else 0.5
    T.setflags(write=False)
    return T


def duplication_matrix(n: int) -> DuplicationMatrix:
    if n < 1:
        raise DimensionError(f"n must be positive, got {n}")
    return DuplicationMatrix(n, _duplication(n))


def kron(A, B):
    return np.kron(np.atleast_2d(A), np.atleast_2d(B))


def kcal(A):
    """``A' (x) A'``; for a vector ``v`` this is the 1 x n^2 row ``v' (x) v'``.

    For the row form, ``kcal(v) @ vec(P) == v' P v``.
    """
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        return np.kron(A, A)[None, :]
    return np.kron(A.T, A.T)


def numerical_rank(M, rtol=RANK_RTOL):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def lstsq_normal(M, b, rtol=RANK_RTOL, which=None):
    """Unique minimizer of ``||M x - b||`` for full-column-rank `M`.

    Solved with a Householder QR factorization; at full rank this equals
    ``(M'M)^{-1} M' b``.  Raises :class:`RankDeficient` otherwise.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    b = np.asarray(b, dtype=float)
    rows, cols = M.shape
    if b.shape != (rows,):
        raise DimensionError(f"right-hand side has shape {b.shape}, expected ({rows},)")
    rank = numerical_rank(M, rtol)
    if rank < cols:
        label = f" in the {which} system" if which else ""
        raise RankDeficient(
            f"least-squares matrix{label} has numerical rank {rank} < {cols}",
            rank=rank,
            cols=cols,
            which=which,
        )
    Qm, Rm = sla.qr(M, mode="economic")
    return sla.solve_triangular(Rm, Qm.T @ b)
