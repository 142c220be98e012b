"""Constraint-dissolving single-loop methods for bilevel optimization."""
from .core import (
    FieldElement,
    element_exact_Dh,
    element_hat_Dh,
    element_hat_Dp,
    element_hat_Ds,
    h_value,
    newton_map,
    stationarity_measure,
)
from .estimator import CDBSolver
from .linalg import LinearOperator, cg_solve
from .problem import BilevelProblem, ProblemConstants, validate_problem
from .problems import build_nqll, build_preset, build_qll, build_scalar_nonsmooth
from .solvers import RunResult, Schedule, SolverConfig, run, thresholds

__version__ = "0.1.0"

__all__ = [
    "BilevelProblem",
    "CDBSolver",
    "FieldElement",
    "LinearOperator",
    "ProblemConstants",
    "RunResult",
    "Schedule",
    "SolverConfig",
    "build_nqll",
    "build_preset",
    "build_qll",
    "build_scalar_nonsmooth",
    "cg_solve",
    "element_exact_Dh",
    "element_hat_Dh",
    "element_hat_Dp",
    "element_hat_Ds",
    "h_value",
    "newton_map",
    "run",
    "stationarity_measure",
    "thresholds",
    "validate_problem",
    "__version__",
]
