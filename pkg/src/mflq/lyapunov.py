"""Dense Kronecker solvers for the closed-loop Lyapunov equations.

The stochastic equation ``Acl' P + P Acl + Ccl' P Ccl + Lam = 0`` is solved
through its n^2 x n^2 vectorized form; n is expected to be small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NotSolvable
from .model import FeedbackGain, MfSystem, RiccatiPair, hat_system, is_positive_definite

RESIDUAL_RTOL = 1e-10
COND_LIMIT = 1e14


@dataclass(frozen=True)
class ClosedLoopMatrices:
    Acl: np.ndarray
    Ccl: np.ndarray
    Ahatcl: np.ndarray
    Chatcl: np.ndarray


def closed_loop(sys: MfSystem, gain: FeedbackGain) -> ClosedLoopMatrices:
    h = hat_system(sys)
    return ClosedLoopMatrices(
        Acl=sys.A + sys.B @ gain.K,
        Ccl=sys.C + sys.D @ gain.K,
        Ahatcl=h.Ahat + h.Bhat @ gain.Khat,
        Chatcl=h.Chat + h.Dhat @ gain.Khat,
    )


def lyapunov_operator(Acl, Ccl=None):
    """Matrix of ``P -> Acl' P + P Acl + Ccl' P Ccl`` acting on ``vec(P)``."""
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    n = Acl.shape[0]
    eye = np.eye(n)
    op = np.kron(eye, Acl.T) + np.kron(Acl.T, eye)
    if Ccl is not None:
        Ccl = np.atleast_2d(np.asarray(Ccl, dtype=float))
        op = op + np.kron(Ccl.T, Ccl.T)
    return op


def _solve(Acl, Ccl, Lam, label):
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    Lam = np.atleast_2d(np.asarray(Lam, dtype=float))
    n = Acl.shape[0]
    op = lyapunov_operator(Acl, Ccl)
    if np.linalg.cond(op) > COND_LIMIT:
        raise NotSolvable(f"{label} Lyapunov operator is singular to working precision")
    try:
        x = np.linalg.solve(op, -Lam.reshape(-1, order="F"))
    except np.linalg.LinAlgError as exc:
        raise NotSolvable(f"{label} Lyapunov operator is singular") from exc
    P = x.reshape((n, n), order="F")
    P = 0.5 * (P + P.T)

    res = Acl.T @ P + P @ Acl + Lam
    c_norm = 0.0
    if Ccl is not None:
        Ccl = np.atleast_2d(np.asarray(Ccl, dtype=float))
        res = res + Ccl.T @ P @ Ccl
        c_norm = np.linalg.norm(Ccl, 2) ** 2
    scale = np.linalg.norm(Lam) + np.linalg.norm(P) * (2 * np.linalg.norm(Acl, 2) + c_norm)
    if np.linalg.norm(res) > RESIDUAL_RTOL * scale:
        raise NotSolvable(f"{label} Lyapunov solution fails the residual check ({np.linalg.norm(res):.3g})")
    return P


def solve_stochastic_lyapunov(Acl, Ccl, Lam):
    """Symmetric P with ``Acl' P + P Acl + Ccl' P Ccl + Lam = 0``."""
    return _solve(Acl, Ccl, Lam, "stochastic")


def solve_deterministic_lyapunov(Ahatcl, LamHat):
    """Symmetric Phat with ``Ahatcl' Phat + Phat Ahatcl + LamHat = 0``."""
    return _solve(Ahatcl, None, LamHat, "deterministic")


@dataclass(frozen=True)
class StabilizerReport:
    ok: bool
    witness: RiccatiPair | None
    reason: str = ""

    def __bool__(self):
        return self.ok


def is_stabilizer(sys: MfSystem, gain: FeedbackGain) -> StabilizerReport:
    """Mean-field L2 stabilizer test via the identity-forced Lyapunov pair.

    The gain stabilizes iff both Lyapunov equations with right-hand side I
    have positive definite solutions; that pair is returned as a witness.
    """
    cl = closed_loop(sys, gain)
    eye = np.eye(sys.n)
    try:
        P = solve_stochastic_lyapunov(cl.Acl, cl.Ccl, eye)
    except NotSolvable as exc:
        return StabilizerReport(False, None, f"K component: {exc}")
    try:
        Phat = solve_deterministic_lyapunov(cl.Ahatcl, eye)
    except NotSolvable as exc:
        return StabilizerReport(False, None, f"Khat component: {exc}")
    reasons = []
    if not is_positive_definite(P):
        reasons.append("K component: Lyapunov solution is not positive definite")
    if not is_positive_definite(Phat):
        reasons.append("Khat component: Lyapunov solution is not positive definite")
    if reasons:
        return StabilizerReport(False, None, "; ".join(reasons))
    return StabilizerReport(True, RiccatiPair(P, Phat))
