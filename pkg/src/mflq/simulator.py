"""Seeded Euler-Maruyama simulation of the closed-loop mean-field SDE.

Paths are simulated in fixed-size blocks.  Every block draws its normals from
its own PCG64 stream derived from ``(seed, stream key, block index)``, and
block results are reduced in block order, so a run is bit-identical for any
number of worker threads (``MFLQ_THREADS``).
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba as nb
import numpy as np
from scipy.linalg import expm

from .errors import Diverged
from .gare import running_weight
from .lyapunov import closed_loop
from .model import CostWeights, FeedbackGain, MfSystem

BLOCK_SIZE = 1024
DECAY_RATIO = 0.05


@dataclass(frozen=True)
class SimGrid:
    dt: float = 0.01
    steps: int = 2000
    t0: float = 0.0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if int(self.steps) < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def horizon(self):
        return self.steps * self.dt

    @property
    def times(self):
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @classmethod
    def from_horizon(cls, T, dt):
        return cls(dt=dt, steps=int(round(T / dt)))


@dataclass(frozen=True)
class TrajectoryBundle:
    """Closed-loop sample for one initial state.

    ``mean_path[l]`` is the cross-path sample mean at ``s_l`` and
    ``cov_path[l]`` the sample covariance ``(1/H) sum_h (X_h - mean)(X_h - mean)'``.
    ``paths`` is only kept when requested.
    """

    grid: SimGrid
    x0: np.ndarray
    mean_path: np.ndarray
    cov_path: np.ndarray
    H: int
    seed: int
    gain: FeedbackGain
    paths: np.ndarray | None = None

    @property
    def second_moment(self):
        """``E|X(s_l)|^2`` estimated from the sample."""
        return np.einsum("lii->l", self.cov_path) + np.einsum("li,li->l", self.mean_path, self.mean_path)


@dataclass(frozen=True)
class FundamentalBundle:
    grid: SimGrid
    paths: np.ndarray
    seed: int


@dataclass(frozen=True)
class FundamentalEstimate:
    P: np.ndarray
    stderr: np.ndarray
    H: int


def worker_count():
    env = os.environ.get("MFLQ_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def block_generators(seed, key, H):
    """One PCG64 stream per block of BLOCK_SIZE paths."""
    nblocks = -(-H // BLOCK_SIZE)
    gens = []
    for b in range(nblocks):
        ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key) + (b,))
        gens.append(np.random.Generator(np.random.PCG64(ss)))
    return gens


@nb.njit(cache=True, nogil=True)
def _euler_mean(x0, Ahcl, dt, steps):
    n = x0.shape[0]
    xb = np.empty((steps + 1, n))
    xb[0] = x0
    for l in range(steps):
        for i in range(n):
            d = 0.0
            for k in range(n):
                d += Ahcl[i, k] * xb[l, k]
            xb[l + 1, i] = xb[l, i] + (0.0 + d) * dt
    return xb


@nb.njit(cache=True, nogil=True)
def _em_block(gen, xbar, Acl, Ahcl, Ccl, Chcl, dt, steps, npaths, noisy, sum_y, sum_yy, paths, store):
    # state is laid out (n, npaths) so the inner loops run over paths
    n = xbar.shape[1]
    sq = math.sqrt(dt)
    X = np.empty((n, npaths))
    Y = np.zeros((n, npaths))
    drift = np.empty((n, npaths))
    diff = np.empty((n, npaths))
    dw = np.zeros(npaths)
    for i in range(n):
        for p in range(npaths):
            X[i, p] = xbar[0, i]
            if store:
                paths[p, 0, i] = X[i, p]
    for l in range(steps):
        if noisy:
            dw = gen.standard_normal(npaths) * sq
        for i in range(n):
            # mean-field parts are shared by every path at this step
            d = 0.0
            g = 0.0
            for k in range(n):
                d += Ahcl[i, k] * xbar[l, k]
                g += Chcl[i, k] * xbar[l, k]
            for p in range(npaths):
                drift[i, p] = 0.0
                diff[i, p] = 0.0
            for k in range(n):
                a = Acl[i, k]
                c = Ccl[i, k]
                for p in range(npaths):
                    drift[i, p] += a * Y[k, p]
                    diff[i, p] += c * Y[k, p]
            for p in range(npaths):
                drift[i, p] = X[i, p] + (drift[i, p] + d) * dt + (diff[i, p] + g) * dw[p]
        for i in range(n):
            s = 0.0
            xb = xbar[l + 1, i]
            for p in range(npaths):
                X[i, p] = drift[i, p]
                Y[i, p] = drift[i, p] - xb
                s += Y[i, p]
                if store:
                    paths[p, l + 1, i] = drift[i, p]
            sum_y[l + 1, i] += s
            if not math.isfinite(s):
                return l + 1
        for i in range(n):
            for k in range(n):
                s = 0.0
                for p in range(npaths):
                    s += Y[i, p] * Y[k, p]
                sum_yy[l + 1, i, k] += s
    return -1


@nb.njit(cache=True, nogil=True)
def _fundamental_block(gen, Acl, Ccl, Lam, dt, steps, npaths, integrals, paths, store):
    n = Acl.shape[0]
    sq = math.sqrt(dt)
    Phi = np.empty((n, n))
    Pn = np.empty((n, n))
    tmp = np.empty((n, n))
    for p in range(npaths):
        for i in range(n):
            for j in range(n):
                Phi[i, j] = 1.0 if i == j else 0.0
        for l in range(steps + 1):
            if store:
                paths[p, l] = Phi
            if l == steps:
                break
            # left-endpoint quadrature of Phi' Lam Phi
            for i in range(n):
                for j in range(n):
                    s = 0.0
                    for k in range(n):
                        s += Lam[i, k] * Phi[k, j]
                    tmp[i, j] = s
            for i in range(n):
                for j in range(n):
                    s = 0.0
                    for k in range(n):
                        s += Phi[k, i] * tmp[k, j]
                    integrals[p, i, j] += s * dt
            dw = gen.standard_normal() * sq
            for i in range(n):
                for j in range(n):
                    a = 0.0
                    c = 0.0
                    for k in range(n):
                        a += Acl[i, k] * Phi[k, j]
                        c += Ccl[i, k] * Phi[k, j]
                    Pn[i, j] = Phi[i, j] + a * dt + c * dw
            for i in range(n):
                for j in range(n):
                    if not math.isfinite(Pn[i, j]):
                        return l + 1
                    Phi[i, j] = Pn[i, j]
    return -1


def _run_blocks(fn, nblocks, workers):
    if workers <= 1 or nblocks <= 1:
        return [fn(b) for b in range(nblocks)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(nblocks)))


def simulate_closed_loop(
    sys: MfSystem,
    gain: FeedbackGain,
    x0,
    grid: SimGrid,
    H: int,
    seed: int,
    stream=(),
    store_paths=False,
    workers=None,
) -> TrajectoryBundle:
    """Simulate `H` closed-loop paths from the deterministic state `x0`.

    The mean-field term inside each path's coefficients is the deterministic
    Euler recursion ``xbar <- xbar + (Ahat + Bhat Khat) xbar dt``, so paths
    are independent; the returned mean path is the cross-path sample mean.
    `stream` is an extra tuple of integers mixed into the seed derivation.
    """
    if H < 1:
        raise ValueError(f"H must be >= 1, got {H}")
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    n, L = sys.n, grid.steps
    if x0.shape != (n,):
        raise ValueError(f"x0 has shape {x0.shape}, expected ({n},)")
    cl = closed_loop(sys, gain)
    Acl, Ahcl, Ccl, Chcl = (np.ascontiguousarray(M) for M in (cl.Acl, cl.Ahatcl, cl.Ccl, cl.Chatcl))
    noisy = bool(np.any(Ccl != 0.0) or np.any(Chcl != 0.0))
    xbar = _euler_mean(x0, Ahcl, grid.dt, L)
    if not np.all(np.isfinite(xbar)):
        raise Diverged("deterministic mean recursion overflowed", step=int(np.argmin(np.isfinite(xbar).all(axis=1))))

    gens = block_generators(seed, stream, H)
    paths = np.empty((H, L + 1, n)) if store_paths else np.empty((0, 0, n))

    def run(b):
        lo = b * BLOCK_SIZE
        hi = min(H, lo + BLOCK_SIZE)
        sx = np.zeros((L + 1, n))
        syy = np.zeros((L + 1, n, n))
        view = paths[lo:hi] if store_paths else paths
        bad = _em_block(gens[b], xbar, Acl, Ahcl, Ccl, Chcl, grid.dt, L, hi - lo, noisy, sx, syy, view, store_paths)
        return bad, sx, syy

    sum_y = np.zeros((L + 1, n))
    sum_yy = np.zeros((L + 1, n, n))
    first_bad = -1
    for bad, sx, syy in _run_blocks(run, len(gens), workers or worker_count()):
        if bad >= 0:
            first_bad = bad if first_bad < 0 else min(first_bad, bad)
        sum_y += sx
        sum_yy += syy
    if first_bad >= 0:
        raise Diverged(f"closed-loop state became non-finite at step {first_bad}", step=first_bad)

    # paths are summed as deviations from xbar, which keeps the moments
    # well conditioned and exact when there is no noise
    dev = sum_y / H
    mean = xbar + dev
    cov = sum_yy / H - np.einsum("li,lk->lik", dev, dev)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    return TrajectoryBundle(
        grid=grid,
        x0=x0,
        mean_path=mean,
        cov_path=cov,
        H=int(H),
        seed=int(seed),
        gain=gain,
        paths=paths if store_paths else None,
    )


def euler_mean(sys: MfSystem, gain: FeedbackGain, x0, grid: SimGrid):
    """Deterministic Euler recursion for the conditional mean."""
    cl = closed_loop(sys, gain)
    return _euler_mean(np.asarray(x0, dtype=float).reshape(-1), np.ascontiguousarray(cl.Ahatcl), grid.dt, grid.steps)


def mean_ode(sys: MfSystem, gain: FeedbackGain, x0, grid: SimGrid):
    """Exact conditional mean ``exp((Ahat + Bhat Khat)(s - t)) x0`` on the grid."""
    cl = closed_loop(sys, gain)
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    step = expm(cl.Ahatcl * grid.dt)
    out = np.empty((grid.steps + 1, x0.size))
    out[0] = x0
    for l in range(grid.steps):
        out[l + 1] = step @ out[l]
    return out


def adaptive_grid(sys: MfSystem, gain: FeedbackGain, dt=0.01, rtol=1e-6, T0=20.0, T_max=1e4):
    """Smallest doubling of `T0` with ``||exp(Ahatcl T)||_2 <= rtol``."""
    cl = closed_loop(sys, gain)
    T = T0
    while np.linalg.norm(expm(cl.Ahatcl * T), 2) > rtol:
        T *= 2.0
        if T > T_max:
            raise Diverged(f"mean dynamics do not decay below {rtol} within T={T_max}")
    return SimGrid.from_horizon(T, dt)


def estimate_cost(bundle: TrajectoryBundle, w: CostWeights, gain: FeedbackGain) -> float:
    """Left-endpoint estimate of the cost under ``u = K (X - Xbar) + Khat Xbar``.

    Every expectation is replaced by its sample counterpart, with ``Xbar``
    the cross-path sample mean.
    """
    L, dt = bundle.grid.steps, bundle.grid.dt
    m = bundle.mean_path[:L]
    cov = bundle.cov_path[:L]
    K, Kh = gain.K, gain.Khat
    # sample second moments of (X, u); u - ubar = K (X - m), ubar = Khat m
    Exx = cov + np.einsum("li,lk->lik", m, m)
    ubar = m @ Kh.T
    Exu = np.einsum("lij,kj->lik", cov, K) + np.einsum("li,lk->lik", m, ubar)
    Euu = np.einsum("ai,lij,bj->lab", K, cov, K) + np.einsum("la,lb->lab", ubar, ubar)
    run = (
        np.einsum("ij,lji->l", w.Q, Exx)
        + np.einsum("li,ij,lj->l", m, w.Qbar, m)
        + 2.0 * np.einsum("ij,lji->l", w.S, Exu)
        + 2.0 * np.einsum("la,ai,li->l", ubar, w.Sbar, m)
        + np.einsum("ab,lba->l", w.R, Euu)
        + np.einsum("la,ab,lb->l", ubar, w.Rbar, ubar)
    )
    return float(dt * run.sum())


def decay_check(bundle: TrajectoryBundle, ratio=DECAY_RATIO):
    """Second-moment curve and whether ``E|X(T)|^2 <= ratio * E|X(0)|^2``."""
    curve = bundle.second_moment
    return bool(curve[-1] <= ratio * curve[0]), curve


def simulate_fundamental(sys, gain, grid, H, seed, stream=(), workers=None):
    """Sample paths of the fundamental matrix ``dPhi = Acl Phi ds + Ccl Phi dW``."""
    _, paths = _fundamental(sys, gain, np.zeros((sys.n, sys.n)), grid, H, seed, stream, True, workers)
    return FundamentalBundle(grid=grid, paths=paths, seed=int(seed))


def _fundamental(sys, gain, Lam, grid, H, seed, stream, store, workers):
    cl = closed_loop(sys, gain)
    n, L = sys.n, grid.steps
    Acl, Ccl = np.ascontiguousarray(cl.Acl), np.ascontiguousarray(cl.Ccl)
    Lam = np.ascontiguousarray(Lam, dtype=float)
    gens = block_generators(seed, stream, H)
    integrals = np.zeros((H, n, n))
    paths = np.empty((H, L + 1, n, n)) if store else np.empty((0, 0, n, n))

    def run(b):
        lo = b * BLOCK_SIZE
        hi = min(H, lo + BLOCK_SIZE)
        view = paths[lo:hi] if store else paths
        return _fundamental_block(gens[b], Acl, Ccl, Lam, grid.dt, L, hi - lo, integrals[lo:hi], view, store)

    bads = [b for b in _run_blocks(run, len(gens), workers or worker_count()) if b >= 0]
    if bads:
        raise Diverged(f"fundamental solution became non-finite at step {min(bads)}", step=min(bads))
    return integrals, (paths if store else None)


def estimate_P_fundamental(
    sys: MfSystem,
    w: CostWeights,
    gain: FeedbackGain,
    grid: SimGrid,
    H: int,
    seed: int,
    stream=(),
    workers=None,
) -> FundamentalEstimate:
    """Monte Carlo value of ``E int Phi' (K'RK + S'K + K'S + Q) Phi ds``.

    Returns the symmetrized sample mean and its entrywise standard error.
    """
    Lam = running_weight(w.Q, w.S, w.R, gain.K)
    integrals, _ = _fundamental(sys, gain, Lam, grid, H, seed, stream, False, workers)
    integrals = 0.5 * (integrals + np.swapaxes(integrals, 1, 2))
    P = integrals.mean(axis=0)
    se = integrals.std(axis=0, ddof=1) / math.sqrt(H) if H > 1 else np.full_like(P, np.inf)
    return FundamentalEstimate(P=P, stderr=se, H=int(H))
