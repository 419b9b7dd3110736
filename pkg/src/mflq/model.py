"""Value types for the mean-field LQ system, its cost and feedback policies.

All matrices are stored as read-only float64 arrays so instances can be
shared freely between threads.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionError

SYM_TOL = 1e-10
PD_TOL = 1e-12

SYSTEM_FIELDS = ("A", "Abar", "B", "Bbar", "C", "Cbar", "D", "Dbar")
WEIGHT_FIELDS = ("Q", "Qbar", "S", "Sbar", "R", "Rbar")


def _frozen(a, name, shape=None):
    arr = np.array(a, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix, got {arr.ndim}-d input")
    if shape is not None and arr.shape != shape:
        raise DimensionError(f"{name} has shape {arr.shape}, expected {shape}")
    arr.setflags(write=False)
    return arr


def symmetrize(M, name="matrix", tol=SYM_TOL):
    """Return ``(M + M')/2``, warning when the relative asymmetry exceeds `tol`."""
    M = np.asarray(M, dtype=float)
    norm = np.linalg.norm(M)
    asym = np.linalg.norm(M - M.T)
    if norm > 0 and asym / norm > tol:
        warnings.warn(
            f"{name} is not symmetric (relative asymmetry {asym / norm:.3g}); symmetrizing",
            stacklevel=3,
        )
    return 0.5 * (M + M.T)


def is_positive_definite(M, tol=PD_TOL):
    """Minimum-eigenvalue test ``lambda_min > tol * ||M||_F``."""
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return True
    lam = np.linalg.eigvalsh(0.5 * (M + M.T))
    return bool(lam[0] > tol * np.linalg.norm(M))


def min_eig(M):
    return float(np.linalg.eigvalsh(0.5 * (np.asarray(M) + np.asarray(M).T))[0])


@dataclass(frozen=True)
class HattedSystem:
    """Plain-plus-mean-field coefficients ``A + Abar`` etc."""

    Ahat: np.ndarray
    Bhat: np.ndarray
    Chat: np.ndarray
    Dhat: np.ndarray


@dataclass(frozen=True)
class MfSystem:
    """Constant coefficients of the controlled mean-field SDE.

    ``A, Abar, C, Cbar`` are n x n and ``B, Bbar, D, Dbar`` are n x m.  The
    Brownian motion is one-dimensional.
    """

    A: np.ndarray
    Abar: np.ndarray
    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray

    def __post_init__(self):
        A = _frozen(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n) or n < 1:
            raise DimensionError(f"A must be square, got {A.shape}")
        B = _frozen(self.B, "B")
        if B.shape[0] != n or B.shape[1] < 1:
            raise DimensionError(f"B has shape {B.shape}, expected ({n}, m)")
        m = B.shape[1]
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        for name in ("Abar", "C", "Cbar"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name, (n, n)))
        for name in ("Bbar", "D", "Dbar"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name, (n, m)))

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @classmethod
    def from_plain(cls, A, B, C=None, D=None, **bars):
        """Build a system from the plain matrices; missing entries are zero."""
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.atleast_2d(np.asarray(B, dtype=float))
        n, m = A.shape[0], B.shape[1]
        zn, zm = np.zeros((n, n)), np.zeros((n, m))
        return cls(
            A=A,
            Abar=bars.get("Abar", zn),
            B=B,
            Bbar=bars.get("Bbar", zm),
            C=zn if C is None else C,
            Cbar=bars.get("Cbar", zn),
            D=zm if D is None else D,
            Dbar=bars.get("Dbar", zm),
        )

    def __add__(self, other):
        return MfSystem(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def as_dict(self):
        return {name: getattr(self, name) for name in SYSTEM_FIELDS}


@dataclass(frozen=True)
class CostWeights:
    """Quadratic cost weights; ``Q, Qbar, R, Rbar`` are symmetrized on construction."""

    Q: np.ndarray
    Qbar: np.ndarray
    S: np.ndarray
    Sbar: np.ndarray
    R: np.ndarray
    Rbar: np.ndarray

    def __post_init__(self):
        Q = _frozen(self.Q, "Q")
        R = _frozen(self.R, "R")
        n, m = Q.shape[0], R.shape[0]
        if Q.shape != (n, n):
            raise DimensionError(f"Q must be square, got {Q.shape}")
        if R.shape != (m, m):
            raise DimensionError(f"R must be square, got {R.shape}")
        for name, shape in (("Q", (n, n)), ("Qbar", (n, n)), ("R", (m, m)), ("Rbar", (m, m))):
            M = _frozen(getattr(self, name), name, shape)
            object.__setattr__(self, name, _frozen(symmetrize(M, name), name))
        for name in ("S", "Sbar"):
            object.__setattr__(self, name, _frozen(getattr(self, name), name, (m, n)))

    @property
    def n(self):
        return self.Q.shape[0]

    @property
    def m(self):
        return self.R.shape[0]

    @property
    def Qhat(self):
        return self.Q + self.Qbar

    @property
    def Shat(self):
        return self.S + self.Sbar

    @property
    def Rhat(self):
        return self.R + self.Rbar

    @classmethod
    def from_plain(cls, Q, R, S=None, **bars):
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        R = np.atleast_2d(np.asarray(R, dtype=float))
        n, m = Q.shape[0], R.shape[0]
        return cls(
            Q=Q,
            Qbar=bars.get("Qbar", np.zeros((n, n))),
            S=np.zeros((m, n)) if S is None else S,
            Sbar=bars.get("Sbar", np.zeros((m, n))),
            R=R,
            Rbar=bars.get("Rbar", np.zeros((m, m))),
        )

    def as_dict(self):
        return {name: getattr(self, name) for name in WEIGHT_FIELDS}


@dataclass(frozen=True)
class BlockWeights:
    Qblock: np.ndarray
    Sblock: np.ndarray
    Rblock: np.ndarray


@dataclass(frozen=True)
class FeedbackGain:
    """Gain pair ``(K, Khat)`` of the policy ``u = K (x - xbar) + Khat xbar``."""

    K: np.ndarray
    Khat: np.ndarray

    def __post_init__(self):
        K = _frozen(self.K, "K")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "Khat", _frozen(self.Khat, "Khat", K.shape))

    @classmethod
    def zeros(cls, m, n):
        return cls(np.zeros((m, n)), np.zeros((m, n)))


@dataclass(frozen=True)
class RiccatiPair:
    """Symmetric pair ``(P, Phat)``; inputs are symmetrized on construction."""

    P: np.ndarray
    Phat: np.ndarray

    def __post_init__(self):
        P = _frozen(self.P, "P")
        if P.shape[0] != P.shape[1]:
            raise DimensionError(f"P must be square, got {P.shape}")
        Phat = _frozen(self.Phat, "Phat", P.shape)
        object.__setattr__(self, "P", _frozen(symmetrize(P, "P"), "P"))
        object.__setattr__(self, "Phat", _frozen(symmetrize(Phat, "Phat"), "Phat"))

    def is_positive_definite(self):
        return is_positive_definite(self.P) and is_positive_definite(self.Phat)


@dataclass(frozen=True)
class PdcReport:
    ok: bool
    min_eig_R: float
    min_eig_schur: float

    def __bool__(self):
        return self.ok


def check_dimensions(sys, w):
    if (sys.n, sys.m) != (w.n, w.m):
        raise DimensionError(f"system is (n={sys.n}, m={sys.m}) but weights are (n={w.n}, m={w.m})")


def hat_system(sys: MfSystem) -> HattedSystem:
    return HattedSystem(
        Ahat=sys.A + sys.Abar,
        Bhat=sys.B + sys.Bbar,
        Chat=sys.C + sys.Cbar,
        Dhat=sys.D + sys.Dbar,
    )


def block_weights(w: CostWeights) -> BlockWeights:
    from scipy.linalg import block_diag

    return BlockWeights(
        Qblock=block_diag(w.Q, w.Qhat),
        Sblock=block_diag(w.S, w.Shat),
        Rblock=block_diag(w.R, w.Rhat),
    )


def check_pdc(w: CostWeights) -> PdcReport:
    """Positive-definiteness condition on the block weights.

    True iff the block R is positive definite and so is the Schur complement
    ``Q - S' R^{-1} S``.  When R is not invertible the Schur eigenvalue is
    reported as ``nan`` and the check fails.
    """
    bw = block_weights(w)
    lam_R = min_eig(bw.Rblock)
    if not is_positive_definite(bw.Rblock):
        return PdcReport(False, lam_R, float("nan"))
    schur = bw.Qblock - bw.Sblock.T @ np.linalg.solve(bw.Rblock, bw.Sblock)
    schur = 0.5 * (schur + schur.T)
    lam_S = min_eig(schur)
    return PdcReport(is_positive_definite(schur), lam_R, lam_S)
