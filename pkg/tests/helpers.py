"""Shared instances and reference computations for the test suite."""

from __future__ import annotations

import numpy as np
from scipy.linalg import expm, solve_continuous_lyapunov

from mflq.errors import MflqError
from mflq.gare import find_stabilizer
from mflq.lyapunov import closed_loop
from mflq.model import CostWeights, FeedbackGain, MfSystem, check_pdc
from mflq.simulator import SimGrid, TrajectoryBundle

SQRT2M1 = np.sqrt(2.0) - 1.0


def s0():
    """Scalar noise-free instance with P = Phat = sqrt(2) - 1."""
    return MfSystem.from_plain([[-1.0]], [[1.0]]), CostWeights.from_plain([[1.0]], [[1.0]])


def noisy_scalar():
    sys = MfSystem.from_plain(
        [[-1.0]], [[1.0]], C=[[0.5]], D=[[0.3]], Abar=np.array([[0.2]]), Cbar=np.array([[0.1]]), Dbar=np.array([[0.1]])
    )
    return sys, CostWeights.from_plain([[1.0]], [[1.0]], Qbar=np.array([[0.5]]))


def random_instance(rng, n, m, noise=0.3, drift=0.8, margin=0.3, excitation=0.0, max_chat_cond=None):
    """Random system and PDC-satisfying weights plus a stabilizing gain.

    `excitation` adds a multiple of the identity to Cbar.  That keeps
    ``Chat + Dhat Khat`` well conditioned, so the mean path excites every
    direction, without adding multiplicative noise on the fluctuation.
    With `max_chat_cond`, draws whose closed-loop ``Chat + Dhat Khat`` is
    worse conditioned than that are rejected.
    """
    while True:
        sys = MfSystem(
            A=drift * rng.normal(size=(n, n)),
            Abar=0.3 * rng.normal(size=(n, n)),
            B=rng.normal(size=(n, m)),
            Bbar=0.3 * rng.normal(size=(n, m)),
            C=noise * rng.normal(size=(n, n)),
            Cbar=excitation * np.eye(n) + noise * rng.normal(size=(n, n)),
            D=noise * rng.normal(size=(n, m)),
            Dbar=noise * rng.normal(size=(n, m)),
        )
        G = rng.normal(size=(n, n))
        Hm = rng.normal(size=(m, m))
        Qbar = 0.2 * rng.normal(size=(n, n))
        Rbar = 0.2 * rng.normal(size=(m, m))
        w = CostWeights(
            Q=G.T @ G + np.eye(n),
            Qbar=0.5 * (Qbar + Qbar.T),
            S=0.2 * rng.normal(size=(m, n)),
            Sbar=0.1 * rng.normal(size=(m, n)),
            R=Hm.T @ Hm + np.eye(m),
            Rbar=0.5 * (Rbar + Rbar.T),
        )
        if not check_pdc(w):
            continue
        try:
            gain = find_stabilizer(sys, margin=margin)
        except MflqError:
            continue
        if max_chat_cond is not None and np.linalg.cond(closed_loop(sys, gain).Chatcl) > max_chat_cond:
            continue
        return sys, w, gain


def fixed_point_lyapunov(Acl, Ccl, Lam, iters=500):
    """Stochastic Lyapunov solution by iterating deterministic solves.

    Converges when the diffusion term is a contraction relative to the drift,
    which holds for the moderate noise levels used in the tests.
    """
    P = np.zeros_like(Lam)
    for _ in range(iters):
        Pn = solve_continuous_lyapunov(Acl.T, -(Lam + Ccl.T @ P @ Ccl))
        if np.linalg.norm(Pn - P) < 1e-15 * (1 + np.linalg.norm(Pn)):
            return Pn
        P = Pn
    return P


class ExactMomentEnvironment:
    """Environment that returns the exact mean and covariance on the grid.

    The moments solve the linear moment ODEs, propagated exactly over each
    grid step by a matrix exponential.  Lets the learner be tested without
    Monte Carlo noise.
    """

    def __init__(self, sys: MfSystem, grid: SimGrid):
        self._sys = sys
        self.grid = grid
        self.calls = 0

    def rollout(self, gain: FeedbackGain, states, iteration):
        self.calls += 1
        cl = closed_loop(self._sys, gain)
        n = self._sys.n
        # state (mean, vec cov) with d mean = Ahat m, d Sigma = A S + S A' + C S C' + Ch m m' Ch'
        # the forcing term is quadratic in m, so propagate (m m', Sigma) jointly as a linear system
        I = np.eye(n)
        Lm = np.kron(I, cl.Ahatcl) + np.kron(cl.Ahatcl, I)
        Ls = np.kron(I, cl.Acl) + np.kron(cl.Acl, I) + np.kron(cl.Ccl, cl.Ccl)
        F = np.kron(cl.Chatcl, cl.Chatcl)
        big = np.block([[Lm, np.zeros((n * n, n * n))], [F, Ls]])
        step2 = expm(big * self.grid.dt)
        step1 = expm(cl.Ahatcl * self.grid.dt)
        out = []
        for x0 in np.atleast_2d(states):
            L = self.grid.steps
            mean = np.empty((L + 1, n))
            cov = np.empty((L + 1, n, n))
            mean[0] = x0
            z = np.concatenate([np.outer(x0, x0).reshape(-1, order="F"), np.zeros(n * n)])
            cov[0] = 0.0
            for l in range(L):
                mean[l + 1] = step1 @ mean[l]
                z = step2 @ z
                cov[l + 1] = z[n * n :].reshape((n, n), order="F")
            out.append(TrajectoryBundle(self.grid, np.asarray(x0, float), mean, cov, 1, 0, gain))
        return out
