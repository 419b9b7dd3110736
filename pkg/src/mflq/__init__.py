"""Policy iteration for infinite-horizon linear-quadratic mean-field control.

Two routes to the coupled generalized Riccati pair ``(P, Phat)``: an exact
Lyapunov recursion that needs the full model, and a trajectory-driven
variant that never reads the drift coefficients.
"""

from .errors import (
    Diverged,
    DimensionError,
    MaxIterationsExceeded,
    MflqError,
    NotSolvable,
    NotStabilizer,
    PdcViolated,
    RankDeficient,
    SingularInnerTerm,
)
from .gare import (
    GareResiduals,
    IterationRecord,
    SolveResult,
    find_stabilizer,
    gains_from,
    gare_residuals,
    lyapunov_recursion_step,
    optimal_control,
    solve_gare_model_based,
    value_function,
)
from .linalg import DuplicationMatrix, duplication_matrix, from_vec_plus, kcal, lstsq_normal, vec, vec_plus
from .lyapunov import is_stabilizer, solve_deterministic_lyapunov, solve_stochastic_lyapunov
from .model import CostWeights, FeedbackGain, MfSystem, RiccatiPair, check_pdc, hat_system
from .rl import ModelFreeView, RlConfig, evaluate_policy, improve_policy, policy_iteration, run_algorithm1
from .simulator import SimGrid, TrajectoryBundle, estimate_P_fundamental, estimate_cost, simulate_closed_loop

__version__ = "0.1.0"

__all__ = [
    "check_pdc",
    "CostWeights",
    "DimensionError",
    "Diverged",
    "duplication_matrix",
    "DuplicationMatrix",
    "estimate_cost",
    "estimate_P_fundamental",
    "evaluate_policy",
    "FeedbackGain",
    "find_stabilizer",
    "from_vec_plus",
    "gains_from",
    "gare_residuals",
    "GareResiduals",
    "hat_system",
    "improve_policy",
    "is_stabilizer",
    "IterationRecord",
    "kcal",
    "lstsq_normal",
    "lyapunov_recursion_step",
    "MaxIterationsExceeded",
    "MflqError",
    "MfSystem",
    "ModelFreeView",
    "NotSolvable",
    "NotStabilizer",
    "optimal_control",
    "PdcViolated",
    "policy_iteration",
    "RankDeficient",
    "RiccatiPair",
    "RlConfig",
    "run_algorithm1",
    "SimGrid",
    "simulate_closed_loop",
    "SingularInnerTerm",
    "solve_deterministic_lyapunov",
    "solve_gare_model_based",
    "solve_stochastic_lyapunov",
    "SolveResult",
    "TrajectoryBundle",
    "value_function",
    "vec",
    "vec_plus",
]
