"""Command line front end: ``mflq solve | check-gare | simulate``.

Exit codes: 0 success, 1 usage or input error, 2 mathematical precondition
failure, 3 numerical failure (divergence, rank loss, no convergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import io
from .errors import MflqError, NotStabilizer
from .gare import find_stabilizer, gare_residuals, solve_gare_model_based
from .lyapunov import is_stabilizer
from .model import FeedbackGain
from .rl import ModelFreeView, run_algorithm1, sample_initial_states
from .simulator import SimGrid, adaptive_grid, decay_check, simulate_closed_loop

log = logging.getLogger("mflq")


class UsageError(MflqError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _common(p, out=True):
    p.add_argument("--config", required=True, metavar="PATH", help="JSON problem config")
    p.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    if out:
        p.add_argument("--out", metavar="DIR", help="output directory (default: config 'out')")


def _sim_flags(p):
    p.add_argument("--paths", type=int, metavar="H", help="Monte Carlo paths per initial state")
    p.add_argument("--steps", type=int, metavar="L", help="time steps per path")
    p.add_argument("--dt", type=float, metavar="F", help="time step")
    p.add_argument("--adaptive-horizon", action="store_true", help="extend T until the mean decays by 1e-6")
    p.add_argument("--states", type=int, metavar="N", help="number of sampled initial states")


def build_parser():
    ap = _Parser(prog="mflq", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="policy iteration (model-based or trajectory-driven)")
    _common(p)
    _sim_flags(p)
    p.add_argument("--mode", choices=("model", "rl"), default="model")
    p.add_argument("--epsilon", type=float, metavar="F", help="stopping tolerance")
    p.add_argument("--max-iter", type=int, metavar="N")
    p.add_argument("--auto-gain", action="store_true", help="search for an initial stabilizer if none is given")

    p = sub.add_parser("check-gare", help="residual norms of a candidate (P, Phat)")
    _common(p, out=False)
    p.add_argument("--pair", required=True, metavar="PATH", help="JSON file with P and Phat")

    p = sub.add_parser("simulate", help="closed-loop Monte Carlo trajectories for a gain")
    _common(p)
    _sim_flags(p)
    p.add_argument("--gain", metavar="PATH", help="JSON file with K and Khat (default: config initial gain)")
    p.add_argument("--store-paths", action="store_true", help="write every path to the bundle files")
    return ap


def apply_overrides(cfg: io.ProblemConfig, args) -> io.ProblemConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise UsageError("--seed must be non-negative")
        changes["seed"] = args.seed
    if getattr(args, "out", None):
        changes["out"] = args.out
    grid = cfg.grid
    if getattr(args, "dt", None) is not None or getattr(args, "steps", None) is not None:
        try:
            grid = SimGrid(dt=args.dt if args.dt is not None else grid.dt, steps=args.steps or grid.steps)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        changes["grid"] = grid
    rl = {}
    if getattr(args, "paths", None) is not None:
        rl["H"] = args.paths
    if getattr(args, "states", None) is not None:
        rl["N"] = args.states
    mode = getattr(args, "mode", None)
    if getattr(args, "epsilon", None) is not None:
        if mode == "rl":
            rl["eps"] = args.epsilon
        else:
            changes["model_eps"] = args.epsilon
    if getattr(args, "max_iter", None) is not None:
        if mode == "rl":
            rl["max_iter"] = args.max_iter
        else:
            changes["model_max_iter"] = args.max_iter
    if rl:
        try:
            changes["rl"] = dataclasses.replace(cfg.rl, **rl)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    return cfg.replace(**changes) if changes else cfg


def initial_gain(cfg: io.ProblemConfig, auto=False, check=True) -> FeedbackGain:
    """Config gain, else a searched stabilizer (`auto`), else the zero gain.

    With ``check=False`` the zero gain is returned untested, leaving the
    learner's own trajectory decay check to reject it.
    """
    if cfg.gain0 is not None:
        return cfg.gain0
    if auto:
        gain = find_stabilizer(cfg.system)
        log.info("auto-gain: found stabilizer K=%s Khat=%s", gain.K.tolist(), gain.Khat.tolist())
        return gain
    gain = FeedbackGain.zeros(cfg.m, cfg.n)
    if not check:
        return gain
    report = is_stabilizer(cfg.system, gain)
    if not report:
        raise NotStabilizer(
            f"no initial gain given and the zero gain is not a stabilizer ({report.reason}); "
            "supply initial_gain or pass --auto-gain"
        )
    return gain


def _with_horizon(cfg, gain, adaptive):
    if not adaptive:
        return cfg
    grid = adaptive_grid(cfg.system, gain, dt=cfg.grid.dt, T0=cfg.grid.horizon)
    log.info("adaptive horizon: T=%g (%d steps)", grid.horizon, grid.steps)
    return cfg.replace(grid=grid)


def cmd_solve_model_based(cfg: io.ProblemConfig, auto_gain=False) -> int:
    out = Path(cfg.out)
    gain0 = initial_gain(cfg, auto_gain)
    with io.HistoryWriter(out) as hist:
        try:
            res = solve_gare_model_based(
                cfg.system, cfg.weights, gain0, eps=cfg.model_eps, max_iter=cfg.model_max_iter, callback=hist
            )
        except MflqError as exc:
            hist.summary(status=type(exc).__name__, message=str(exc))
            raise
        last = res.history[-1]
        hist.summary(status="converged", iterations=res.iterations, residP=last.resid_P, residPhat=last.resid_Phat)
    io.write_json(
        out / "solution.json",
        io.solution_dict(
            res.pair, res.gain, mode="model", iterations=res.iterations, residP=last.resid_P, residPhat=last.resid_Phat
        ),
    )
    print(f"converged after {res.iterations} iterations; ||R||_F={last.resid_P:.3e} ||Rhat||_F={last.resid_Phat:.3e}")
    return 0


def cmd_run_rl(cfg: io.ProblemConfig, auto_gain=False, adaptive=False) -> int:
    out = Path(cfg.out)
    gain0 = initial_gain(cfg, auto_gain, check=False)
    cfg = _with_horizon(cfg, gain0, adaptive)
    view = ModelFreeView.from_system(cfg.system)
    io.write_json(
        out / "initial_states.json",
        {"states": sample_initial_states(cfg.n, cfg.rl.N, cfg.seed, cfg.rl.state_range)},
    )
    with io.HistoryWriter(out) as hist:
        try:
            res = run_algorithm1(cfg.system, view, cfg.weights, gain0, cfg.rl, callback=hist)
        except MflqError as exc:
            extra = {}
            if getattr(exc, "rank", None) is not None:
                extra = {"rank": exc.rank, "required": exc.cols, "system": exc.which}
            hist.summary(status=type(exc).__name__, message=str(exc), **extra)
            raise
        last = res.history[-1]
        hist.summary(status="converged", iterations=res.iterations, residP=last.resid_P, residPhat=last.resid_Phat)
    io.write_json(
        out / "solution.json",
        io.solution_dict(
            res.pair,
            res.gain,
            mode="rl",
            iterations=res.iterations,
            residP=last.resid_P,
            residPhat=last.resid_Phat,
            seed=cfg.seed,
            H=cfg.rl.H,
            N=cfg.rl.N,
            dt=cfg.grid.dt,
            steps=cfg.grid.steps,
        ),
    )
    print(f"converged after {res.iterations} iterations; ||R||_F={last.resid_P:.3e} ||Rhat||_F={last.resid_Phat:.3e}")
    return 0


def cmd_check_gare(cfg: io.ProblemConfig, pair_path) -> int:
    pair = io.load_pair(pair_path, cfg.n)
    res = gare_residuals(cfg.system, cfg.weights, pair)
    print(f"||R(P)||_F        {res.norm:.17g}")
    print(f"||Rhat(P,Phat)||_F {res.norm_hat:.17g}")
    print(f"P positive definite      {str(bool(np.all(np.linalg.eigvalsh(pair.P) > 0))).lower()}")
    print(f"Phat positive definite   {str(bool(np.all(np.linalg.eigvalsh(pair.Phat) > 0))).lower()}")
    print(f"D'PD+R positive definite {str(res.inner_pd).lower()}")
    print(f"Dhat'PDhat+Rhat positive definite {str(res.inner_hat_pd).lower()}")
    return 0


def cmd_simulate(cfg: io.ProblemConfig, gain_path=None, store_paths=False, adaptive=False) -> int:
    out = Path(cfg.out)
    gain = io.load_gain(gain_path, cfg.m, cfg.n) if gain_path else initial_gain(cfg)
    cfg = _with_horizon(cfg, gain, adaptive)
    if cfg.initial_states is not None:
        states = cfg.initial_states
    else:
        states = sample_initial_states(cfg.n, cfg.rl.N, cfg.seed, cfg.rl.state_range)
    ok_all = True
    for j, x0 in enumerate(states):
        b = simulate_closed_loop(cfg.system, gain, x0, cfg.grid, cfg.rl.H, cfg.seed, stream=(j,), store_paths=store_paths)
        io.write_mean_csv(b, out / f"mean_{j:03d}.csv")
        io.write_bundle(b, out / f"bundle_{j:03d}.txt")
        ok, curve = decay_check(b, cfg.rl.decay_ratio)
        ok_all &= ok
        print(f"state {j}: E|X(T)|^2 / E|X(0)|^2 = {curve[-1] / curve[0]:.3e}")
    if not ok_all:
        warnings.warn("some trajectories did not decay below the configured ratio", stacklevel=1)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    warnings.simplefilter("default")
    try:
        cfg = apply_overrides(io.load_config(args.config), args)
        if args.command == "solve":
            if args.mode == "model":
                return cmd_solve_model_based(cfg, args.auto_gain)
            return cmd_run_rl(cfg, args.auto_gain, args.adaptive_horizon)
        if args.command == "check-gare":
            return cmd_check_gare(cfg, args.pair)
        return cmd_simulate(cfg, args.gain, args.store_paths, args.adaptive_horizon)
    except MflqError as exc:
        print(f"mflq: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
