"""Constraint-dissolving map, penalty objective and field elements.

The dissolving map takes one Newton step on the lower-level problem,

    A(x, y) = y - hess_yy(x, y)^{-1} grad_y g(x, y),

and the penalty objective is ``h(x, y) = f(x, A(x, y)) + beta/2 ||grad_y g||^2``.
Its stationary points coincide with those of the bilevel problem once
``beta`` exceeds a threshold of order ``M_f Q_g / mu^3``.

Four direction fields are assembled here:

``exact_Dh``
    The conservative field of ``h`` itself; needs third-order oracles.
``hat_Dh``, ``hat_Ds``, ``hat_Dp``
    Third-order-free approximations driving the three subgradient
    algorithms in :mod:`cdbilevel.solvers`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np

from .linalg import CgReport, LinearOperator, cg_solve

__all__ = [
    "InnerSolveError",
    "UnsupportedOperationError",
    "NewtonStep",
    "Iterate",
    "FieldElement",
    "VARIANTS",
    "EXACT_TOL",
    "newton_map",
    "h_value",
    "element_exact_Dh",
    "element_hat_Dh",
    "element_hat_Ds",
    "element_hat_Dp",
    "stationarity_measure",
]

VARIANTS = ("exact_Dh", "hat_Dh", "hat_Ds", "hat_Dp")

# tolerance used for every "exact" inner solve
EXACT_TOL = 1e-12
# inner solves of the hat_Dp projection never run looser than this
_DP_TOL_CAP = 1e-10


class InnerSolveError(RuntimeError):
    """Conjugate gradient hit its iteration cap without meeting the tolerance."""

    def __init__(self, what, report: CgReport, eps):
        super().__init__(
            f"inner solve for {what} did not reach tolerance {eps:g} in "
            f"{report.iterations} iterations (best residual "
            f"{report.residual_norm:.3e}); the lower-level Hessian may be "
            "ill-conditioned or mis-specified")
        self.what = what
        self.report = report
        self.eps = eps
        self.best_residual = report.residual_norm


class UnsupportedOperationError(NotImplementedError):
    pass


def _solve(H: LinearOperator, rhs, eps, what, cap=None):
    sol, rep = cg_solve(H, rhs, eps, cap)
    if not rep.converged:
        raise InnerSolveError(what, rep, eps)
    return sol, rep


class NewtonStep(NamedTuple):
    a_y: np.ndarray
    w: np.ndarray
    residual: float
    iterations: int


def newton_map(prob, x, y, eps=0.0, cap=None, *, grad=None, hess=None):
    """One inexact Newton step on ``g(x, .)`` starting from ``y``.

    Returns ``NewtonStep(a_y, w, residual, iterations)`` where ``w``
    satisfies ``||hess_yy w - grad_y g|| <= eps`` and ``a_y = y - w``.
    ``grad`` and ``hess`` may be passed to reuse already evaluated oracles.

    Raises
    ------
    InnerSolveError
        If CG exhausts ``cap`` iterations (default ``10 p``).
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    G = prob.grad_y_g(x, y) if grad is None else grad
    H = prob.hess_yy(x, y) if hess is None else hess
    w, rep = _solve(H, G, eps, "w = hess_yy^-1 grad_y g", cap)
    return NewtonStep(y - w, w, rep.residual_norm, rep.iterations)


def h_value(prob, x, y, beta, eps=0.0):
    """Penalty objective ``f(x, A(x, y)) + beta/2 ||grad_y g(x, y)||^2``."""
    if not beta > 0:
        raise ValueError("beta must be > 0")
    G = prob.grad_y_g(x, y)
    step = newton_map(prob, x, y, eps, grad=G)
    return float(prob.f_value(x, step.a_y)) + 0.5 * beta * float(G @ G)


@dataclass
class Iterate:
    """Current point with its cached lower-level residual."""

    x: np.ndarray
    y: np.ndarray
    grad_y: np.ndarray
    feas: float
    w: Optional[np.ndarray] = None

    @classmethod
    def at(cls, prob, x, y):
        x = np.array(x, dtype=np.float64)
        y = np.array(y, dtype=np.float64)
        G = np.asarray(prob.grad_y_g(x, y), dtype=np.float64)
        return cls(x, y, G, float(np.linalg.norm(G)))


@dataclass
class FieldElement:
    """An element of one of the direction fields at a point.

    ``(d_x, d_y)`` is the upper-level field element chosen at
    ``(x, a_y)``; ``(dir_x, dir_y)`` is the assembled update direction.
    """

    d_x: np.ndarray
    d_y: np.ndarray
    dir_x: np.ndarray
    dir_y: np.ndarray
    variant: str
    a_y: np.ndarray
    grad_y: np.ndarray
    f_at_A: float
    inner_residuals: dict = field(default_factory=dict)
    inner_tolerances: dict = field(default_factory=dict)
    cg_iterations: dict = field(default_factory=dict)
    stat_x: float = np.nan

    @property
    def direction(self):
        return np.concatenate([self.dir_x, self.dir_y])

    @property
    def dir_norm(self):
        return float(np.hypot(np.linalg.norm(self.dir_x),
                              np.linalg.norm(self.dir_y)))

    @property
    def feas(self):
        return float(np.linalg.norm(self.grad_y))

    def h(self, beta):
        return self.f_at_A + 0.5 * beta * float(self.grad_y @ self.grad_y)


def _upper_probe(prob, x, y, eps1):
    G = np.asarray(prob.grad_y_g(x, y), dtype=np.float64)
    H = prob.hess_yy(x, y)
    step = newton_map(prob, x, y, eps1, grad=G, hess=H)
    d_x, d_y = prob.df_element(x, step.a_y)
    d_x = np.asarray(d_x, dtype=np.float64)
    d_y = np.asarray(d_y, dtype=np.float64)
    f_at_A = float(prob.f_value(x, step.a_y))
    return G, H, step, d_x, d_y, f_at_A


def element_exact_Dh(prob, x, y, beta, tol=EXACT_TOL):
    """Element of the exact conservative field of ``h``.

    ``dir_x = d_x + J_Ax d_y + beta hess_xy grad`` and
    ``dir_y = J_Ay d_y + beta hess_yy grad`` with
    ``J_Ax d_y = -hess_xy u + T_xyy[w] u``, ``J_Ay d_y = T_yyy[w] u``,
    ``u = hess_yy^{-1} d_y`` and ``w = hess_yy^{-1} grad``.
    """
    if not prob.has_third_order:
        raise UnsupportedOperationError(
            "exact_Dh needs third-order oracles third_xyy and third_yyy")
    G, H, step, d_x, d_y, f_at_A = _upper_probe(prob, x, y, tol)
    u, rep = _solve(H, d_y, tol, "u = hess_yy^-1 d_y")
    B = prob.hess_xy(x, y)
    T_xyy = prob.third_xyy(x, y, step.w)
    T_yyy = prob.third_yyy(x, y, step.w)
    Bu = B.apply(u)
    dir_x = d_x - Bu + T_xyy.apply(u) + beta * B.apply(G)
    dir_y = T_yyy.apply(u) + beta * H.apply(G)
    return FieldElement(
        d_x, d_y, dir_x, dir_y, "exact_Dh", step.a_y, G, f_at_A,
        inner_residuals={"w": step.residual, "u": rep.residual_norm},
        inner_tolerances={"w": tol, "u": tol},
        cg_iterations={"w": step.iterations, "v": rep.iterations},
        stat_x=float(np.linalg.norm(d_x - Bu)))


def element_hat_Dh(prob, x, y, beta, eps1, eps2):
    """Direction of the basic subgradient method.

    ``dir_x = d_x - hess_xy (v - beta grad)``, ``dir_y = beta grad`` with
    ``||hess_yy v - d_y|| <= eps2``.
    """
    G, H, step, d_x, d_y, f_at_A = _upper_probe(prob, x, y, eps1)
    v, rep = _solve(H, d_y, eps2, "v = hess_yy^-1 d_y")
    B = prob.hess_xy(x, y)
    Bv = B.apply(v)
    dir_x = d_x - Bv + beta * B.apply(G)
    return FieldElement(
        d_x, d_y, dir_x, beta * G, "hat_Dh", step.a_y, G, f_at_A,
        inner_residuals={"w": step.residual, "v": rep.residual_norm},
        inner_tolerances={"w": eps1, "v": eps2},
        cg_iterations={"w": step.iterations, "v": rep.iterations},
        stat_x=float(np.linalg.norm(d_x - Bv)))


def element_hat_Ds(prob, x, y, beta_hat, eps1, eps2):
    """Direction of the modified subgradient method.

    ``dir_x = d_x - hess_xy v`` (an approximate hypergradient),
    ``dir_y = beta_hat grad``.
    """
    G, H, step, d_x, d_y, f_at_A = _upper_probe(prob, x, y, eps1)
    v, rep = _solve(H, d_y, eps2, "v = hess_yy^-1 d_y")
    dir_x = d_x - prob.hess_xy(x, y).apply(v)
    return FieldElement(
        d_x, d_y, dir_x, beta_hat * G, "hat_Ds", step.a_y, G, f_at_A,
        inner_residuals={"w": step.residual, "v": rep.residual_norm},
        inner_tolerances={"w": eps1, "v": eps2},
        cg_iterations={"w": step.iterations, "v": rep.iterations},
        stat_x=float(np.linalg.norm(dir_x)))


def element_hat_Dp(prob, x, y, beta, eps1):
    """Direction of the inexact subgradient method.

    With ``W = [I, -hess_xy hess_yy^{-1}]`` the direction is
    ``W^T W (d_x, d_y) + (0, beta grad)``, i.e. ``dir_x = p_x`` and
    ``dir_y = beta grad - hess_yy^{-1} hess_yx p_x``. Both inverse
    applications run at ``min(eps1, 1e-10)``.
    """
    G, H, step, d_x, d_y, f_at_A = _upper_probe(prob, x, y, eps1)
    tol = min(eps1, _DP_TOL_CAP)
    v, rep_v = _solve(H, d_y, tol, "v = hess_yy^-1 d_y")
    p_x = d_x - prob.hess_xy(x, y).apply(v)
    r, rep_r = _solve(H, prob.hess_yx(x, y).apply(p_x), tol,
                      "hess_yy^-1 hess_yx p_x")
    return FieldElement(
        d_x, d_y, p_x, beta * G - r, "hat_Dp", step.a_y, G, f_at_A,
        inner_residuals={"w": step.residual, "v": rep_v.residual_norm,
                         "r": rep_r.residual_norm},
        inner_tolerances={"w": eps1, "v": tol, "r": tol},
        cg_iterations={"w": step.iterations,
                       "v": rep_v.iterations + rep_r.iterations},
        stat_x=float(np.linalg.norm(p_x)))


class Stationarity(NamedTuple):
    feas: float
    stat_x: float


def stationarity_measure(prob, x, y, eps=0.0):
    """Feasibility ``||grad_y g||`` and hypergradient residual at ``(x, y)``.

    ``stat_x = ||d_x - hess_xy hess_yy^{-1} d_y||`` with ``(d_x, d_y)``
    chosen at ``(x, A(x, y))``.
    """
    G, H, step, d_x, d_y, _ = _upper_probe(prob, x, y, eps)
    u, _ = _solve(H, d_y, eps, "u = hess_yy^-1 d_y")
    stat_x = float(np.linalg.norm(d_x - prob.hess_xy(x, y).apply(u)))
    return Stationarity(float(np.linalg.norm(G)), stat_x)
