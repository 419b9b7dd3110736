"""Partially model-free policy iteration driven by simulated trajectories.

The learner sees the system only through :class:`ModelFreeView` (input and
diffusion coefficients) and through closed-loop rollouts supplied by an
environment object.  Drift coefficients never reach the evaluation or
improvement code.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import MaxIterationsExceeded, NotStabilizer, PdcViolated, SingularInnerTerm
from .gare import IterationRecord, SolveResult, gare_residuals, policy_improvement, running_weight
from .linalg import DuplicationMatrix, duplication_matrix, from_vec_plus, kcal, lstsq_normal, numerical_rank
from .model import CostWeights, FeedbackGain, MfSystem, RiccatiPair, check_pdc
from .simulator import DECAY_RATIO, SimGrid, TrajectoryBundle, decay_check, simulate_closed_loop

log = logging.getLogger(__name__)

STATE_STREAM = 0xFFFF_FFFF


def default_num_states(n):
    return max(n * (n + 1) // 2 + 5, 15)


@dataclass(frozen=True, slots=True)
class ModelFreeView:
    """Input and diffusion coefficients; there is no drift field by construction."""

    B: np.ndarray
    Bbar: np.ndarray
    C: np.ndarray
    Cbar: np.ndarray
    D: np.ndarray
    Dbar: np.ndarray

    @classmethod
    def from_system(cls, sys: MfSystem):
        return cls(sys.B, sys.Bbar, sys.C, sys.Cbar, sys.D, sys.Dbar)

    @property
    def n(self):
        return self.B.shape[0]

    @property
    def m(self):
        return self.B.shape[1]

    @property
    def Bhat(self):
        return self.B + self.Bbar

    @property
    def Chat(self):
        return self.C + self.Cbar

    @property
    def Dhat(self):
        return self.D + self.Dbar


@dataclass(frozen=True)
class RlConfig:
    N: int
    H: int = 100_000
    grid: SimGrid = field(default_factory=SimGrid)
    eps: float = 1e-3
    max_iter: int = 100
    seed: int = 0
    state_range: tuple = (0.0, 20.0)
    decay_ratio: float = DECAY_RATIO

    def __post_init__(self):
        if self.N < 1 or self.H < 1 or self.max_iter < 1 or not self.eps > 0:
            raise ValueError("N, H, max_iter and eps must be positive")
        lo, hi = self.state_range
        if not hi > lo:
            raise ValueError(f"empty initial-state range {self.state_range}")

    def validate(self, n):
        need = n * (n + 1) // 2
        if self.N < need:
            raise ValueError(f"N={self.N} initial states cannot identify {need} parameters")


@dataclass(frozen=True)
class EvaluationBatch:
    states: np.ndarray
    IX: np.ndarray
    Kx: np.ndarray
    J0: np.ndarray
    J: np.ndarray

    @property
    def N(self):
        return self.states.shape[0]


def sample_initial_states(n, N, seed, state_range=(0.0, 20.0)):
    ss = np.random.SeedSequence(int(seed), spawn_key=(STATE_STREAM,))
    lo, hi = state_range
    return np.random.Generator(np.random.PCG64(ss)).uniform(lo, hi, size=(N, n))


def _fluctuation_weight(gain, w):
    return running_weight(w.Q, w.S, w.R, gain.K)


def objective_J0(bundle: TrajectoryBundle, gain: FeedbackGain, w: CostWeights) -> float:
    """Sampled ``E int <(Q + 2S'K + K'RK)(X - Xbar), X - Xbar> ds`` (left endpoint)."""
    M = _fluctuation_weight(gain, w)
    L = bundle.grid.steps
    return float(bundle.grid.dt * np.einsum("ij,lji->", M, bundle.cov_path[:L]))


def objective_J(bundle: TrajectoryBundle, gain: FeedbackGain, w: CostWeights) -> float:
    """``J0`` plus the mean-path term ``int <(Qhat + 2Shat'Khat + Khat'Rhat Khat) Xbar, Xbar> ds``."""
    Mh = running_weight(w.Qhat, w.Shat, w.Rhat, gain.Khat)
    L = bundle.grid.steps
    m = bundle.mean_path[:L]
    return objective_J0(bundle, gain, w) + float(bundle.grid.dt * np.einsum("li,ij,lj->", m, Mh, m))


def assemble_evaluation_batch(states, bundles, gain, view: ModelFreeView, w) -> EvaluationBatch:
    states = np.atleast_2d(np.asarray(states, dtype=float))
    if len(bundles) != states.shape[0]:
        raise ValueError(f"{states.shape[0]} states but {len(bundles)} bundles")
    Chatcl = view.Chat + view.Dhat @ gain.Khat
    IX, Kx, J0, J = [], [], [], []
    for x, b in zip(states, bundles):
        L = b.grid.steps
        z = b.mean_path[:L] @ Chatcl.T
        # sum_l dt * kcal(z_l) with kcal(z) = z' (x) z'
        IX.append(b.grid.dt * np.einsum("li,lj->ji", z, z).reshape(-1, order="F"))
        Kx.append(kcal(x)[0])
        J0.append(objective_J0(b, gain, w))
        J.append(objective_J(b, gain, w))
    return EvaluationBatch(states, np.array(IX), np.array(Kx), np.array(J0), np.array(J))


@dataclass(frozen=True)
class RankReport:
    ok: bool
    rank_IX: int
    rank_Kx: int
    required: int

    def __bool__(self):
        return self.ok


def check_rank_condition(batch: EvaluationBatch, dup: DuplicationMatrix) -> RankReport:
    r1 = numerical_rank(batch.IX @ dup.T)
    r2 = numerical_rank(batch.Kx @ dup.T)
    return RankReport(r1 == dup.dim and r2 == dup.dim, r1, r2, dup.dim)


def evaluate_policy(batch: EvaluationBatch, dup: DuplicationMatrix) -> RiccatiPair:
    """Least-squares policy evaluation; the P and Phat fits are independent."""
    vp = lstsq_normal(batch.IX @ dup.T, batch.J0, which="P")
    vph = lstsq_normal(batch.Kx @ dup.T, batch.J, which="Phat")
    return RiccatiPair(from_vec_plus(vp, dup.n), from_vec_plus(vph, dup.n))


def improve_policy(pair: RiccatiPair, view: ModelFreeView, w: CostWeights) -> FeedbackGain:
    return policy_improvement(view.B, view.C, view.D, view.Bhat, view.Chat, view.Dhat, w, pair)


class SimulatedEnvironment:
    """Plays the unknown real system: returns closed-loop rollouts for a gain.

    This is the only object in a learning run that holds the drift matrices.
    """

    def __init__(self, sys: MfSystem, grid: SimGrid, H: int, seed: int, workers=None):
        self._sys = sys
        self.grid = grid
        self.H = H
        self.seed = seed
        self.workers = workers

    def rollout(self, gain, states, iteration):
        return [
            simulate_closed_loop(
                self._sys, gain, x, self.grid, self.H, self.seed, stream=(iteration, j), workers=self.workers
            )
            for j, x in enumerate(states)
        ]


def policy_iteration(env, view: ModelFreeView, w: CostWeights, gain0: FeedbackGain, cfg: RlConfig, diagnostics=None, callback=None):
    """Trajectory-driven policy iteration against `env`.

    `env.rollout(gain, states, iteration)` must return one bundle per state.
    `diagnostics(pair)`, when given, returns ``(resid_P, resid_Phat)`` for
    reporting only.
    """
    n = view.n
    pdc = check_pdc(w)
    if not pdc:
        raise PdcViolated(f"cost weights violate the positive-definiteness condition ({pdc})")
    dup = duplication_matrix(n)
    states = sample_initial_states(n, cfg.N, cfg.seed, cfg.state_range)

    history = []
    gain, prev = gain0, None
    for it in range(cfg.max_iter + 1):
        bundles = env.rollout(gain, states, it)
        if it == 0:
            curves = np.array([decay_check(b, cfg.decay_ratio)[1] for b in bundles])
            total = curves.sum(axis=0)
            if not total[-1] <= cfg.decay_ratio * total[0]:
                raise NotStabilizer(
                    f"initial gain does not stabilize the observed trajectories "
                    f"(E|X(T)|^2 / E|X(0)|^2 = {total[-1] / total[0]:.3g})"
                )
        Chatcl = view.Chat + view.Dhat @ gain.Khat
        if numerical_rank(Chatcl) < n:
            warnings.warn(f"Chat + Dhat Khat is singular at iteration {it}", stacklevel=2)
        batch = assemble_evaluation_batch(states, bundles, gain, view, w)
        pair = evaluate_policy(batch, dup)
        gain = improve_policy(pair, view, w)

        if prev is None:
            dP = dPh = math.nan
        else:
            dP = float(np.linalg.norm(pair.P - prev.P))
            dPh = float(np.linalg.norm(pair.Phat - prev.Phat))
        rP, rPh = diagnostics(pair) if diagnostics is not None else (math.nan, math.nan)
        rec = IterationRecord(it + 1, pair, gain, dP, dPh, rP, rPh)
        history.append(rec)
        log.info("iteration %d: dP=%.3e dPhat=%.3e", it + 1, dP, dPh)
        if callback is not None:
            callback(rec)
        if prev is not None and dP < cfg.eps and dPh < cfg.eps:
            return SolveResult(pair, gain, history)
        prev = pair
    raise MaxIterationsExceeded(f"no convergence within {cfg.max_iter} iterations")


def full_model_diagnostics(sys: MfSystem, w: CostWeights):
    """GARE residual norms against the true model (diagnostic only)."""

    def diag(pair):
        try:
            res = gare_residuals(sys, w, pair)
        except SingularInnerTerm:
            return math.nan, math.nan
        return res.norm, res.norm_hat

    return diag


def run_algorithm1(sys: MfSystem, view: ModelFreeView, w: CostWeights, gain0: FeedbackGain, cfg: RlConfig, workers=None, callback=None):
    """Run the learner with `sys` used only as the simulated environment."""
    env = SimulatedEnvironment(sys, cfg.grid, cfg.H, cfg.seed, workers=workers)
    return policy_iteration(env, view, w, gain0, cfg, diagnostics=full_model_diagnostics(sys, w), callback=callback)
