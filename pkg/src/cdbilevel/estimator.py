"""scikit-learn style front end for :func:`cdbilevel.solvers.run`.

The "data" of a bilevel solve is the problem itself, so :meth:`fit` takes a
:class:`~cdbilevel.problem.BilevelProblem` rather than a design matrix.
Hyperparameters are flat constructor arguments, which gives
``get_params`` / ``set_params`` / ``clone`` for free.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .problem import BilevelProblem
from .core import stationarity_measure
from .solvers import Schedule, SolverConfig, run

__all__ = ["CDBSolver"]


class CDBSolver(BaseEstimator):
    """Single-loop constraint-dissolving solver.

    Parameters
    ----------
    algorithm : {"alg1_basic", "alg2_modified", "alg3_inexact", "exact_dh_descent"}
    beta, beta_hat : float or None
        Penalty weights; ``None`` puts them at 1.01 times their thresholds.
    eta0 : float or None
        Stepsize scale; ``None`` derives it from ``L_g``.
    step_exponent : float
        ``a`` in ``eta_k = eta0 (k + 1)^-a``; must lie in ``(1/2, 1]``.
    tol1_scale, tol1_exponent, tol2_scale, tol2_exponent : float
        Inner tolerance schedules ``c (k + 1)^-q``.
    max_iters, feas_tol, stat_tol, value_oscillation_tol, window :
        Stopping rule, see :class:`~cdbilevel.solvers.SolverConfig`.
    force_thresholds : bool
        Skip the penalty threshold checks.
    record_trace : bool
        Keep every :class:`~cdbilevel.solvers.TraceRecord` in ``trace_``.

    Attributes
    ----------
    x_, y_ : ndarray
        Final iterate.
    status_ : str
    n_iter_ : int
    trace_ : list of TraceRecord
        Empty unless ``record_trace``.
    result_ : RunResult
    """

    def __init__(self, algorithm="alg1_basic", beta=None, beta_hat=None,
                 eta0=None, step_exponent=0.75, tol1_scale=1.0,
                 tol1_exponent=0.5, tol2_scale=1.0, tol2_exponent=0.6,
                 max_iters=100_000, feas_tol=1e-6, stat_tol=1e-5,
                 value_oscillation_tol=1e-8, window=100,
                 force_thresholds=False, record_trace=False):
        self.algorithm = algorithm
        self.beta = beta
        self.beta_hat = beta_hat
        self.eta0 = eta0
        self.step_exponent = step_exponent
        self.tol1_scale = tol1_scale
        self.tol1_exponent = tol1_exponent
        self.tol2_scale = tol2_scale
        self.tol2_exponent = tol2_exponent
        self.max_iters = max_iters
        self.feas_tol = feas_tol
        self.stat_tol = stat_tol
        self.value_oscillation_tol = value_oscillation_tol
        self.window = window
        self.force_thresholds = force_thresholds
        self.record_trace = record_trace

    def to_config(self):
        return SolverConfig(
            algorithm=self.algorithm, beta=self.beta, beta_hat=self.beta_hat,
            step=Schedule(self.eta0, self.step_exponent),
            tol1=Schedule(self.tol1_scale, self.tol1_exponent),
            tol2=Schedule(self.tol2_scale, self.tol2_exponent),
            max_iters=self.max_iters, feas_tol=self.feas_tol,
            stat_tol=self.stat_tol,
            value_oscillation_tol=self.value_oscillation_tol,
            window=self.window, force_thresholds=self.force_thresholds)

    def fit(self, problem, x0=None, y0=None):
        """Run the solver on ``problem`` from ``(x0, y0)``; returns ``self``."""
        if not isinstance(problem, BilevelProblem):
            raise TypeError("fit expects a BilevelProblem, got "
                            f"{type(problem).__name__}")
        trace = []
        result = run(problem, self.to_config(), x0, y0,
                     sink=trace.append if self.record_trace else None)
        self.result_ = result
        self.x_, self.y_ = result.x, result.y
        self.status_ = result.status
        self.n_iter_ = result.iterations
        self.trace_ = trace
        self.config_ = result.config
        return self

    def score(self, problem):
        """Negated exact hypergradient residual ``-stat_x`` at the fit (higher is better)."""
        check_is_fitted(self, "result_")
        return -float(stationarity_measure(problem, self.x_, self.y_, 0.0).stat_x)

    @property
    def converged_(self):
        check_is_fitted(self, "result_")
        return self.status_ == "converged"
