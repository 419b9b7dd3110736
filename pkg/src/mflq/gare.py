"""Model-based side: GARE residuals, gain formulas and exact policy iteration."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import MaxIterationsExceeded, NotSolvable, NotStabilizer, PdcViolated, SingularInnerTerm
from .lyapunov import closed_loop, is_stabilizer, solve_deterministic_lyapunov, solve_stochastic_lyapunov
from .model import (
    CostWeights,
    FeedbackGain,
    MfSystem,
    RiccatiPair,
    check_dimensions,
    check_pdc,
    hat_system,
    is_positive_definite,
)

MAX_ITER = 100
EPSILON = 1e-9
INNER_COND_LIMIT = 1e13


def gare_tolerance(w: CostWeights) -> float:
    return 1e-8 * (1.0 + np.linalg.norm(w.Q))


@dataclass(frozen=True)
class GareResiduals:
    R: np.ndarray
    Rhat: np.ndarray
    inner_pd: bool
    inner_hat_pd: bool

    @property
    def norm(self):
        return float(np.linalg.norm(self.R))

    @property
    def norm_hat(self):
        return float(np.linalg.norm(self.Rhat))


def _inner_solve(M, rhs, label):
    if np.linalg.cond(M) > INNER_COND_LIMIT:
        raise SingularInnerTerm(f"{label} is singular to working precision")
    return np.linalg.solve(M, rhs)


def gare_residuals(sys: MfSystem, w: CostWeights, pair: RiccatiPair) -> GareResiduals:
    """Left-hand sides of the two coupled Riccati equations at `pair`."""
    check_dimensions(sys, w)
    h = hat_system(sys)
    P, Ph = pair.P, pair.Phat
    A, B, C, D = sys.A, sys.B, sys.C, sys.D

    inner = D.T @ P @ D + w.R
    cross = B.T @ P + D.T @ P @ C + w.S
    res = A.T @ P + P @ A + C.T @ P @ C + w.Q - cross.T @ _inner_solve(inner, cross, "D'PD + R")

    inner_h = h.Dhat.T @ P @ h.Dhat + w.Rhat
    cross_h = h.Bhat.T @ Ph + h.Dhat.T @ P @ h.Chat + w.Shat
    res_h = (
        h.Ahat.T @ Ph
        + Ph @ h.Ahat
        + h.Chat.T @ P @ h.Chat
        + w.Qhat
        - cross_h.T @ _inner_solve(inner_h, cross_h, "Dhat'PDhat + Rhat")
    )
    return GareResiduals(
        R=0.5 * (res + res.T),
        Rhat=0.5 * (res_h + res_h.T),
        inner_pd=is_positive_definite(inner),
        inner_hat_pd=is_positive_definite(inner_h),
    )


def policy_improvement(B, C, D, Bhat, Chat, Dhat, w: CostWeights, pair: RiccatiPair) -> FeedbackGain:
    """Gain update shared by the model-based and the trajectory-driven loops.

    Only the input, diffusion and cost coefficients enter; the drift matrix
    is never needed.
    """
    P, Ph = pair.P, pair.Phat
    K = -_inner_solve(D.T @ P @ D + w.R, B.T @ P + D.T @ P @ C + w.S, "D'PD + R")
    Khat = -_inner_solve(
        Dhat.T @ P @ Dhat + w.Rhat,
        Bhat.T @ Ph + Dhat.T @ P @ Chat + w.Shat,
        "Dhat'PDhat + Rhat",
    )
    return FeedbackGain(K, Khat)


def gains_from(sys: MfSystem, w: CostWeights, pair: RiccatiPair) -> FeedbackGain:
    h = hat_system(sys)
    return policy_improvement(sys.B, sys.C, sys.D, h.Bhat, h.Chat, h.Dhat, w, pair)


def running_weight(Q, S, R, K):
    """Symmetric ``K'RK + S'K + K'S + Q``."""
    M = K.T @ R @ K + S.T @ K + K.T @ S + Q
    return 0.5 * (M + M.T)


def lyapunov_recursion_step(sys: MfSystem, w: CostWeights, gain: FeedbackGain, check=True) -> RiccatiPair:
    """Exact policy evaluation of `gain` by the two closed-loop Lyapunov equations."""
    check_dimensions(sys, w)
    if check:
        report = is_stabilizer(sys, gain)
        if not report:
            raise NotStabilizer(f"gain is not a mean-field L2 stabilizer ({report.reason})")
    cl = closed_loop(sys, gain)
    P = solve_stochastic_lyapunov(cl.Acl, cl.Ccl, running_weight(w.Q, w.S, w.R, gain.K))
    lam_hat = running_weight(w.Qhat, w.Shat, w.Rhat, gain.Khat) + cl.Chatcl.T @ P @ cl.Chatcl
    Phat = solve_deterministic_lyapunov(cl.Ahatcl, lam_hat)
    return RiccatiPair(P, Phat)


@dataclass(frozen=True)
class IterationRecord:
    """One policy-evaluation result ``(P(i), Phat(i))`` and the gain improved from it.

    ``delta_P`` and ``delta_Phat`` are ``nan`` for the first record, which has
    no predecessor.  Residuals are diagnostic and always use the full model.
    """

    index: int
    pair: RiccatiPair
    gain: FeedbackGain
    delta_P: float
    delta_Phat: float
    resid_P: float
    resid_Phat: float


@dataclass
class SolveResult:
    pair: RiccatiPair
    gain: FeedbackGain
    history: list = field(default_factory=list)

    @property
    def iterations(self):
        """Number of stopping-rule comparisons made (first one at i = 1)."""
        return max(len(self.history) - 1, 0)


def _record(index, sys, w, pair, gain, prev):
    if prev is None:
        dP = dPh = math.nan
    else:
        dP = float(np.linalg.norm(pair.P - prev.P))
        dPh = float(np.linalg.norm(pair.Phat - prev.Phat))
    try:
        res = gare_residuals(sys, w, pair)
        rP, rPh = res.norm, res.norm_hat
    except SingularInnerTerm:
        rP = rPh = math.nan
    return IterationRecord(index, pair, gain, dP, dPh, rP, rPh)


def solve_gare_model_based(
    sys: MfSystem,
    w: CostWeights,
    gain0: FeedbackGain,
    eps: float = EPSILON,
    max_iter: int = MAX_ITER,
    callback=None,
) -> SolveResult:
    """Lyapunov recursion scheme: alternate exact evaluation and improvement.

    Stops once both Frobenius changes fall below `eps`; the first comparison
    is between the first two evaluated pairs.
    """
    check_dimensions(sys, w)
    pdc = check_pdc(w)
    if not pdc:
        raise PdcViolated(
            f"cost weights violate the positive-definiteness condition "
            f"(min eig R-block {pdc.min_eig_R:.3g}, Schur complement {pdc.min_eig_schur:.3g})"
        )
    report = is_stabilizer(sys, gain0)
    if not report:
        raise NotStabilizer(f"initial gain is not a stabilizer ({report.reason})")

    history = []
    gain, prev = gain0, None
    for index in range(1, max_iter + 2):
        pair = lyapunov_recursion_step(sys, w, gain, check=index > 1)
        gain = gains_from(sys, w, pair)
        rec = _record(index, sys, w, pair, gain, prev)
        history.append(rec)
        if callback is not None:
            callback(rec)
        if prev is not None and rec.delta_P < eps and rec.delta_Phat < eps:
            tol = gare_tolerance(w)
            if rec.resid_P > tol or rec.resid_Phat > tol:
                warnings.warn(
                    f"stopped with GARE residuals {rec.resid_P:.3g}, {rec.resid_Phat:.3g} above {tol:.3g}",
                    stacklevel=2,
                )
            return SolveResult(pair, gain, history)
        prev = pair
    raise MaxIterationsExceeded(f"no convergence within {max_iter} iterations")


def value_function(pair: RiccatiPair, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(x @ pair.Phat @ x)


def optimal_control(gain: FeedbackGain, x, xbar):
    """Feedback ``u = K x + (Khat - K) xbar``."""
    x = np.asarray(x, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    return gain.K @ x + (gain.Khat - gain.K) @ xbar


def _shifted(sys, beta):
    shift = beta * np.eye(sys.n)
    return MfSystem(sys.A - shift, sys.Abar, sys.B, sys.Bbar, sys.C, sys.Cbar, sys.D, sys.Dbar)


def find_stabilizer(sys: MfSystem, max_steps: int = 200, margin: float = 0.0) -> FeedbackGain:
    """Search for a stabilizing gain by continuation in a drift shift.

    With ``margin > 0`` the gain stabilizes ``A + margin I`` instead, so the
    closed loop decays at least that fast.

    ``A - beta I`` is stabilized by the zero gain for large beta.  The optimal
    gain of an auxiliary problem (identity weights) at one shift is reused as
    the initial stabilizer at a smaller shift until beta reaches zero.  Uses
    the full model.
    """
    if margin:
        sys = _shifted(sys, -margin)
    n, m = sys.n, sys.m
    gain = FeedbackGain.zeros(m, n)
    if is_stabilizer(sys, gain):
        return gain
    aux = CostWeights.from_plain(np.eye(n), np.eye(m))
    beta = 1.0
    while not is_stabilizer(_shifted(sys, beta), gain):
        beta *= 2.0
        if beta > 1e8:
            raise NotStabilizer("could not find a shift that the zero gain stabilizes")
    for _ in range(max_steps):
        try:
            gain = solve_gare_model_based(_shifted(sys, beta), aux, gain, eps=1e-8).gain
        except (NotSolvable, SingularInnerTerm, MaxIterationsExceeded) as exc:
            raise NotStabilizer(f"continuation failed at shift {beta:.3g}: {exc}") from exc
        if is_stabilizer(sys, gain):
            return gain
        lo = 0.0
        while not is_stabilizer(_shifted(sys, lo), gain):
            lo = 0.5 * (lo + beta)
            if beta - lo < 1e-12 * max(beta, 1.0):
                raise NotStabilizer("system appears not to be mean-field L2 stabilizable")
        beta = lo
    raise NotStabilizer(f"no stabilizer found within {max_steps} continuation steps")
