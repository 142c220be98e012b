"""Single-loop subgradient methods on the penalty objective ``h``.

All methods instantiate one iteration

    x_{k+1} = x_k - eta_k dir_x,    y_{k+1} = y_k - eta_k dir_y,

where the direction is an element of one of the fields in :mod:`cdbilevel.core`
computed with inner tolerances ``eps1_k`` (Newton step) and ``eps2_k``
(inverse-Hessian action on the upper-level element):

=================== ============ ===========================================
algorithm           field        y-direction
=================== ============ ===========================================
``alg1_basic``      ``hat_Dh``   ``beta grad_y g``
``alg2_modified``   ``hat_Ds``   ``beta_hat grad_y g`` (TTSA / SUSTAIN
                                 without momentum)
``alg3_inexact``    ``hat_Dp``   ``beta grad_y g - hess_yy^-1 hess_yx p_x``
                                 (STABLE)
``exact_dh_descent`` ``exact_Dh`` exact field, diagnostics only
=================== ============ ===========================================
"""
from __future__ import annotations

import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from ._validation import check_count, check_scalar, check_vector
from .core import (
    EXACT_TOL,
    InnerSolveError,
    Iterate,
    element_exact_Dh,
    element_hat_Dh,
    element_hat_Dp,
    element_hat_Ds,
    h_value,
    stationarity_measure,
)

__all__ = [
    "ALGORITHMS",
    "Schedule",
    "SolverConfig",
    "TraceRecord",
    "RunResult",
    "ThresholdError",
    "ScheduleError",
    "NonFiniteDirectionError",
    "thresholds",
    "resolve_config",
    "validate_config",
    "framework_step",
    "run",
    "compute_direction",
    "preset_ttsa",
    "preset_sustain_nomomentum",
    "preset_stable",
]

ALGORITHMS = ("alg1_basic", "alg2_modified", "alg3_inexact", "exact_dh_descent")
VARIANT_OF = {
    "alg1_basic": "hat_Dh",
    "alg2_modified": "hat_Ds",
    "alg3_inexact": "hat_Dp",
    "exact_dh_descent": "exact_Dh",
}
THRESHOLD_MARGIN = 1.01
DIVERGENCE_FACTOR = 1e8


class ThresholdError(ValueError):
    """Penalty parameters violate the algorithm's hypothesis."""

    def __init__(self, inequality, detail):
        super().__init__(f"threshold violated: {inequality} ({detail})")
        self.inequality = inequality


class ScheduleError(ValueError):
    pass


class NonFiniteDirectionError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Schedule:
    """Power schedule ``scale * (k + 1) ** (-exponent)``.

    ``scale=None`` is allowed for the stepsize and resolved from the problem
    constants by :func:`resolve_config`.
    """

    scale: Optional[float] = None
    exponent: float = 0.75
    kind: str = "power"

    def __call__(self, k):
        if self.scale is None:
            raise ValueError("schedule scale is unresolved")
        return self.scale * (k + 1.0) ** (-self.exponent)


def _default_step():
    return Schedule(None, 0.75)


def _default_tol1():
    return Schedule(1.0, 0.5)


def _default_tol2():
    return Schedule(1.0, 0.6)


@dataclass(frozen=True)
class SolverConfig:
    """Algorithm choice, penalty weights, schedules and stopping rule.

    ``beta``, ``beta_hat`` and the stepsize scale may be left as ``None``;
    :func:`resolve_config` then places the penalties at 1.01 times their
    thresholds and sets ``eta0 = 1 / (L_g max(1, s))`` where ``s`` is the
    ratio of the y-stepsize to the x-stepsize.

    The run stops when ``feas <= feas_tol``, the exact hypergradient residual
    is ``<= stat_tol`` and the last ``window`` values of ``h`` oscillate by at
    most ``value_oscillation_tol``.
    """

    algorithm: str = "alg1_basic"
    beta: Optional[float] = None
    beta_hat: Optional[float] = None
    step: Schedule = field(default_factory=_default_step)
    tol1: Schedule = field(default_factory=_default_tol1)
    tol2: Schedule = field(default_factory=_default_tol2)
    max_iters: int = 100_000
    feas_tol: float = 1e-6
    stat_tol: float = 1e-5
    value_oscillation_tol: float = 1e-8
    window: int = 100
    seed: int = 0
    force_thresholds: bool = False
    preset: Optional[str] = None

    @property
    def y_step_ratio(self):
        """Ratio of the effective y-stepsize to ``eta_k``."""
        if self.algorithm == "alg2_modified":
            return self.beta_hat
        return self.beta

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        for key in ("step", "tol1", "tol2"):
            if key in data and isinstance(data[key], dict):
                data[key] = Schedule(**data[key])
        return cls(**data)


@dataclass(frozen=True)
class TraceRecord:
    k: int
    eta_k: float
    eps1_k: float
    eps2_k: float
    h: float
    f_at_A: float
    feas: float
    stat_x: float
    dir_norm: float
    cg_iters_w: int
    cg_iters_v: int
    wall_nanos: int

    FIELDS = ("k", "eta_k", "eps1_k", "eps2_k", "h", "f_at_A", "feas",
              "stat_x", "dir_norm", "cg_iters_w", "cg_iters_v", "wall_nanos")

    def as_row(self):
        return [getattr(self, name) for name in self.FIELDS]


@dataclass
class RunResult:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    final: dict
    config: SolverConfig
    message: str = ""
    first_feasible_k: Optional[int] = None

    @property
    def converged(self):
        return self.status == "converged"

    def summary(self):
        return {
            "status": self.status,
            "iterations": self.iterations,
            "message": self.message,
            "first_feasible_k": self.first_feasible_k,
            "final": {k: float(v) for k, v in self.final.items()},
            "x": [float(v) for v in self.x],
            "y": [float(v) for v in self.y],
        }


# --- thresholds -------------------------------------------------------------

def thresholds(constants, algorithm):
    """Lower bounds on the penalty parameters required by ``algorithm``.

    Returns a dict with ``beta`` (its threshold), ``beta_hat_factor`` (for
    ``alg2_modified``: ``beta_hat >= beta * factor``, else ``None``) and the
    human-readable inequalities.
    """
    mu, l_g, q_g, m_f = constants.mu, constants.l_g, constants.q_g, constants.m_f
    if algorithm in ("alg1_basic", "exact_dh_descent"):
        return {"beta": 2 * m_f * q_g / mu ** 3, "beta_hat_factor": None,
                "beta_inequality": "β ≥ 2M_fQ_g/μ³"}
    if algorithm == "alg2_modified":
        return {"beta": 4 * q_g * m_f / mu ** 3,
                "beta_hat_factor": max(8 * l_g ** 2 / mu, 1 / (4 * mu), mu / 4),
                "beta_inequality": "β ≥ 4Q_gM_f/μ³",
                "beta_hat_inequality": "β̂ ≥ β·max{8L_g²/μ, 1/(4μ), μ/4}"}
    if algorithm == "alg3_inexact":
        return {"beta": max(8 * m_f * q_g / mu ** 3,
                            4 * m_f * q_g * l_g / mu ** 3.5),
                "beta_hat_factor": None,
                "beta_inequality": "β ≥ max{8M_fQ_g/μ³, 4M_fQ_gL_g/μ^3.5}"}
    raise ValueError(f"unknown algorithm {algorithm!r}; choose from {ALGORITHMS}")


def _check_schedules(config):
    a = config.step.exponent
    if config.step.kind != "power" or config.tol1.kind != "power" \
            or config.tol2.kind != "power":
        raise ScheduleError("only power schedules are supported")
    if not 0.5 < a <= 1.0:
        raise ScheduleError(
            f"stepsize exponent a={a} must lie in (1/2, 1] so that the steps "
            "are not summable but square summable")
    if config.step.scale is not None and not config.step.scale > 0:
        raise ScheduleError("eta0 must be > 0")
    if not config.tol1.exponent > 0 or not config.tol1.scale >= 0:
        raise ScheduleError("eps1 schedule needs exponent q1 > 0 and scale >= 0")
    if not config.tol2.scale >= 0 or not config.tol2.exponent + a > 1.0:
        raise ScheduleError(
            f"eps2 schedule needs q2 + a > 1 (got {config.tol2.exponent} + {a}) "
            "so that sum eps2_k eta_k converges")


def validate_config(config, constants):
    """Raise :class:`ThresholdError` / :class:`ScheduleError` on a bad config.

    Threshold checks are skipped when ``config.force_thresholds`` is set;
    positivity of the penalties is always enforced.
    """
    if config.algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {config.algorithm!r}")
    _check_schedules(config)
    check_count(config.max_iters, "max_iters", minimum=0)
    check_count(config.window, "window")
    for name in ("feas_tol", "stat_tol", "value_oscillation_tol"):
        check_scalar(getattr(config, name), name, min_val=0.0)
    if config.beta is None or not config.beta > 0:
        raise ValueError("beta must be resolved and > 0")
    if config.algorithm == "alg2_modified" and (
            config.beta_hat is None or not config.beta_hat > 0):
        raise ValueError("beta_hat must be resolved and > 0")
    if config.force_thresholds:
        return
    thr = thresholds(constants, config.algorithm)
    if config.beta < thr["beta"]:
        raise ThresholdError(thr["beta_inequality"],
                             f"β = {config.beta:.6g} < {thr['beta']:.6g}")
    if thr["beta_hat_factor"] is not None:
        need = config.beta * thr["beta_hat_factor"]
        if config.beta_hat < need:
            raise ThresholdError(thr["beta_hat_inequality"],
                                 f"β̂ = {config.beta_hat:.6g} < {need:.6g}")


def resolve_config(config, constants):
    """Fill in automatic penalties and stepsize scale, then validate."""
    thr = thresholds(constants, config.algorithm)
    beta, beta_hat = config.beta, config.beta_hat
    factor = thr["beta_hat_factor"]
    if beta is None:
        beta = THRESHOLD_MARGIN * thr["beta"]
        if beta == 0.0:
            # every threshold vanishes when Q_g = 0; normalize the y-scale to 1
            if factor is not None and beta_hat is None:
                beta = 1.0 / (THRESHOLD_MARGIN * factor)
            elif factor is not None:
                beta = beta_hat / (THRESHOLD_MARGIN * factor)
            else:
                beta = 1.0
    if factor is not None and beta_hat is None:
        beta_hat = THRESHOLD_MARGIN * beta * factor
    resolved = replace(config, beta=float(beta),
                       beta_hat=None if beta_hat is None else float(beta_hat))
    if resolved.step.scale is None:
        ratio = resolved.y_step_ratio
        eta0 = 1.0 / (constants.l_g * max(1.0, ratio))
        resolved = replace(resolved, step=replace(resolved.step, scale=eta0))
    validate_config(resolved, constants)
    return resolved


# --- iteration --------------------------------------------------------------

def framework_step(prob, iterate, direction, eta):
    """Move ``iterate`` by ``-eta`` times the assembled direction."""
    if not eta > 0:
        raise ValueError("eta must be > 0")
    dx, dy = direction.dir_x, direction.dir_y
    if not (np.all(np.isfinite(dx)) and np.all(np.isfinite(dy))):
        raise NonFiniteDirectionError(
            f"non-finite {direction.variant} direction; an oracle blew up")
    return Iterate.at(prob, iterate.x - eta * dx, iterate.y - eta * dy)


def compute_direction(prob, config, x, y, eps1, eps2):
    alg = config.algorithm
    if alg == "alg1_basic":
        return element_hat_Dh(prob, x, y, config.beta, eps1, eps2)
    if alg == "alg2_modified":
        return element_hat_Ds(prob, x, y, config.beta_hat, eps1, eps2)
    if alg == "alg3_inexact":
        return element_hat_Dp(prob, x, y, config.beta, eps1)
    if alg == "exact_dh_descent":
        return element_exact_Dh(prob, x, y, config.beta)
    raise ValueError(f"unknown algorithm {alg!r}")


def _final_measures(prob, config, x, y):
    feas, stat_x = stationarity_measure(prob, x, y, 0.0)
    el = compute_direction(prob, config, x, y, EXACT_TOL, EXACT_TOL)
    return {"feas": feas, "stat_x": stat_x,
            "h": h_value(prob, x, y, config.beta, 0.0),
            "dir_norm": el.dir_norm}


def run(prob, config, x0=None, y0=None, sink: Optional[Callable] = None):
    """Run one single-loop method from ``(x0, y0)`` (zeros by default).

    Parameters
    ----------
    prob : BilevelProblem
    config : SolverConfig
        Resolved on the fly with :func:`resolve_config`.
    sink : callable, optional
        Receives one :class:`TraceRecord` per iteration.

    Returns
    -------
    RunResult
        ``status`` is ``converged``, ``max_iters``, ``diverged`` (iterates
        left the ball of radius ``1e8 (1 + ||(x0, y0)||)`` or the direction
        became non-finite) or ``failed`` (an inner solve hit its cap).
    """
    config = resolve_config(config, prob.constants)
    if prob.single_use:
        prob = prob.clone()
    x0 = np.zeros(prob.n) if x0 is None else check_vector(x0, prob.n, "x0")
    y0 = np.zeros(prob.p) if y0 is None else check_vector(y0, prob.p, "y0")
    radius = DIVERGENCE_FACTOR * (1.0 + float(np.hypot(np.linalg.norm(x0),
                                                       np.linalg.norm(y0))))
    l_over_mu = prob.constants.l_g / prob.constants.mu

    it = Iterate.at(prob, x0, y0)
    window = deque(maxlen=config.window)
    status, message, first_feasible = "max_iters", "", None
    k = 0
    while k < config.max_iters:
        t0 = time.perf_counter_ns()
        eta = config.step(k)
        eps1, eps2 = config.tol1(k), config.tol2(k)
        try:
            el = compute_direction(prob, config, it.x, it.y, eps1, eps2)
        except InnerSolveError as exc:
            status, message = "failed", str(exc)
            break
        h = el.h(config.beta)
        window.append(h)
        feas = el.feas
        if first_feasible is None and feas <= config.feas_tol:
            first_feasible = k

        stop = False
        if (feas <= config.feas_tol and len(window) == config.window
                and max(window) - min(window) <= config.value_oscillation_tol
                and el.stat_x <= config.stat_tol + l_over_mu * eps2):
            cert = stationarity_measure(prob, it.x, it.y, 0.0)
            stop = cert.feas <= config.feas_tol and cert.stat_x <= config.stat_tol

        if not stop:
            try:
                it = framework_step(prob, it, el, eta)
            except NonFiniteDirectionError as exc:
                status, message = "diverged", str(exc)
        wall = time.perf_counter_ns() - t0
        if sink is not None:
            sink(TraceRecord(
                k, float(eta), float(eps1), float(eps2), float(h),
                float(el.f_at_A), float(feas), float(el.stat_x),
                float(el.dir_norm), int(el.cg_iterations.get("w", 0)),
                int(el.cg_iterations.get("v", 0)), int(wall)))
        k += 1
        if stop:
            status = "converged"
            break
        if status == "diverged":
            break
        if not np.hypot(np.linalg.norm(it.x), np.linalg.norm(it.y)) <= radius:
            status = "diverged"
            message = ("iterates left the ball of radius "
                       f"{radius:.3g}; they are not uniformly bounded")
            break

    final = {}
    if status in ("converged", "max_iters"):
        try:
            final = _final_measures(prob, config, it.x, it.y)
        except InnerSolveError as exc:
            status, message = "failed", str(exc)
    return RunResult(it.x, it.y, status, k, final, config, message,
                     first_feasible)


# --- presets ----------------------------------------------------------------

def preset_ttsa(config=None):
    """Deterministic TTSA: algorithm 2 with y-stepsize ``beta_hat * eta_k``."""
    config = SolverConfig() if config is None else config
    return replace(config, algorithm="alg2_modified", preset="ttsa")


def preset_sustain_nomomentum(config=None):
    """SUSTAIN with both momentum weights set to one: algorithm 2 again."""
    config = SolverConfig() if config is None else config
    return replace(config, algorithm="alg2_modified", preset="sustain_nomomentum")


def preset_stable(config=None):
    """Deterministic STABLE: algorithm 3 with ``tau_k = beta * eta_k``."""
    config = SolverConfig() if config is None else config
    return replace(config, algorithm="alg3_inexact", preset="stable")


PRESET_MAPPINGS = {
    "ttsa": preset_ttsa,
    "sustain_nomomentum": preset_sustain_nomomentum,
    "stable": preset_stable,
}
