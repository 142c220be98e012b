"""Numerical verification of the equivalence and descent properties.

Every checker returns a :class:`CheckReport` with the worst margin over the
tested points (``>= 0`` means the inequality held everywhere), the constant
the inequality uses, and a pass/fail verdict. "Exact" quantities inside the
checks use inner tolerance ``1e-12`` or solve to stagnation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_random_state
from .core import (
    EXACT_TOL,
    UnsupportedOperationError,
    element_exact_Dh,
    element_hat_Dh,
    element_hat_Dp,
    element_hat_Ds,
    h_value,
    newton_map,
    stationarity_measure,
)
from .linalg import cg_solve
from .problem import validate_problem
from .solvers import SolverConfig, resolve_config, thresholds

__all__ = [
    "CheckReport",
    "sample_points",
    "damped_newton_ystar",
    "descent_constant",
    "check_gradient_fd",
    "check_contraction",
    "check_descent",
    "check_equivalence_at_solution",
    "check_boundedness",
    "check_inverse_hessian_lipschitz",
    "check_fA_directional",
    "run_battery",
]

GRADIENT_REL_TOL = 1e-4
CONTRACTION_SLACK = 1e-10
DESCENT_SLACK = 1e-9
BOUNDEDNESS_SLACK = 1e-9


@dataclass
class CheckReport:
    name: str
    passed: bool
    points: int
    worst_margin: float
    constant: dict = field(default_factory=dict)
    details: dict = field(default_factory=dict)

    def to_dict(self):
        def clean(v):
            if isinstance(v, (np.floating, np.integer)):
                return v.item()
            if isinstance(v, np.ndarray):
                return v.tolist()
            if isinstance(v, dict):
                return {k: clean(u) for k, u in v.items()}
            return v
        return {"name": self.name, "passed": bool(self.passed),
                "points": int(self.points),
                "worst_margin": (float(self.worst_margin)
                                 if np.isfinite(self.worst_margin) else None),
                "constant": clean(self.constant),
                "details": clean(self.details)}


def sample_points(prob, count, seed=0, radius=1.0):
    """Draw ``count`` points uniformly from ``[-3, 3]^(n+p)`` scaled by ``radius``."""
    rng = check_random_state(seed)
    return [(3.0 * radius * rng.uniform(-1, 1, prob.n),
             3.0 * radius * rng.uniform(-1, 1, prob.p)) for _ in range(count)]


def damped_newton_ystar(prob, x, y0=None, tol=1e-12, max_iter=100):
    """Lower-level solution ``y*(x)`` by damped Newton with dense solves."""
    y = np.zeros(prob.p) if y0 is None else np.array(y0, dtype=np.float64)
    for _ in range(max_iter):
        G = prob.grad_y_g(x, y)
        gnorm = float(np.linalg.norm(G))
        if gnorm <= tol:
            return y
        step = np.linalg.solve(prob.hess_yy(x, y).to_dense(), G)
        g0, slope, t = prob.g_value(x, y), float(G @ step), 1.0
        while t > 1e-12:
            trial = y - t * step
            if (prob.g_value(x, trial) <= g0 - 1e-4 * t * slope
                    or np.linalg.norm(prob.grad_y_g(x, trial)) < gnorm):
                break
            t *= 0.5
        y = y - t * step
    if np.linalg.norm(prob.grad_y_g(x, y)) > tol:
        raise RuntimeError("damped Newton did not reach the requested tolerance")
    return y


def check_gradient_fd(prob, beta, points, rel_tol=GRADIENT_REL_TOL):
    """Compare the exact field element of ``h`` with central differences.

    Only meaningful for smooth ``f``. The step is ``1e-6 (1 + ||(x, y)||)``
    per coordinate and ``h`` is evaluated with inner solves to stagnation.
    """
    if not prob.has_third_order:
        raise UnsupportedOperationError("gradient check needs third-order oracles")
    worst = 0.0
    for x, y in points:
        el = element_exact_Dh(prob, x, y, beta)
        z = np.concatenate([x, y])
        step = 1e-6 * (1.0 + np.linalg.norm(z))
        fd = np.empty_like(z)
        for j in range(z.size):
            zp, zm = z.copy(), z.copy()
            zp[j] += step
            zm[j] -= step
            fd[j] = (h_value(prob, zp[:prob.n], zp[prob.n:], beta)
                     - h_value(prob, zm[:prob.n], zm[prob.n:], beta)) / (2 * step)
        an = el.direction
        rel = float(np.linalg.norm(fd - an)) / max(float(np.linalg.norm(an)), 1e-6)
        worst = max(worst, rel)
    return CheckReport("gradient_fd", worst <= rel_tol, len(points),
                       rel_tol - worst, {"rel_tol": rel_tol, "beta": beta},
                       {"max_rel_err": worst})


def check_contraction(prob, points, slack=CONTRACTION_SLACK, name="contraction"):
    """``||A(x, y) - y*(x)|| <= Q_g/(2 mu^3) ||grad_y g(x, y)||^2 + slack``."""
    c = prob.constants
    coef = c.q_g / (2.0 * c.mu ** 3)
    worst, worst_gap, max_feas = np.inf, 0.0, 0.0
    for x, y in points:
        G = prob.grad_y_g(x, y)
        a_y = newton_map(prob, x, y, EXACT_TOL, grad=G).a_y
        ys = damped_newton_ystar(prob, x, y0=a_y)
        gap = float(np.linalg.norm(a_y - ys))
        feas2 = float(G @ G)
        margin = coef * feas2 + slack - gap
        if margin < worst:
            worst, worst_gap = margin, gap
        max_feas = max(max_feas, np.sqrt(feas2))
    return CheckReport(name, worst >= 0, len(points), worst,
                       {"Q_g/(2mu^3)": coef, "slack": slack},
                       {"gap_at_worst": worst_gap, "max_feas": max_feas})


def descent_constant(constants, variant, beta=None, beta_hat=None):
    mu, l_g = constants.mu, constants.l_g
    if variant == "hat_Dh":
        return min(1.0, (2.0 - np.sqrt(2.0)) * mu / 2.0)
    if variant == "hat_Ds":
        return min(0.25, beta ** 2 / (16.0 * beta_hat ** 2))
    if variant == "hat_Dp":
        return min(mu ** 2 / (4.0 * l_g ** 2), mu / 4.0)
    raise ValueError(f"unknown variant {variant!r}")


_VARIANT_ALG = {"hat_Dh": "alg1_basic", "hat_Ds": "alg2_modified",
                "hat_Dp": "alg3_inexact"}


def _variant_element(prob, variant, x, y, beta, beta_hat, tol=EXACT_TOL):
    if variant == "hat_Dh":
        return element_hat_Dh(prob, x, y, beta, tol, tol)
    if variant == "hat_Ds":
        return element_hat_Ds(prob, x, y, beta_hat, tol, tol)
    if variant == "hat_Dp":
        return element_hat_Dp(prob, x, y, beta, tol)
    if variant == "exact_Dh":
        return element_exact_Dh(prob, x, y, beta, tol)
    raise ValueError(f"unknown variant {variant!r}")


def check_descent(prob, variant, beta, beta_hat=None, points=(), delta=None):
    """``<exact element, variant element> >= delta ||variant element||^2 - 1e-9``.

    ``delta`` defaults to the variant's descent constant. For ``hat_Ds``
    the exact element uses ``beta`` and the variant uses ``beta_hat``.
    """
    if variant == "hat_Ds" and beta_hat is None:
        raise ValueError("hat_Ds needs beta_hat")
    c = prob.constants
    if delta is None:
        delta = descent_constant(c, variant, beta, beta_hat)
    thr = thresholds(c, _VARIANT_ALG[variant])
    ok_thr = beta >= thr["beta"] and (
        thr["beta_hat_factor"] is None or beta_hat >= beta * thr["beta_hat_factor"])
    worst, worst_ratio = np.inf, np.inf
    for x, y in points:
        z = element_exact_Dh(prob, x, y, beta).direction
        w = _variant_element(prob, variant, x, y, beta, beta_hat).direction
        ww = float(w @ w)
        inner = float(z @ w)
        margin = inner - delta * ww + DESCENT_SLACK
        worst = min(worst, margin)
        if ww > 0:
            worst_ratio = min(worst_ratio, inner / ww)
    return CheckReport(f"descent_{variant}", worst >= 0, len(points), worst,
                       {"delta": delta, "beta": beta, "beta_hat": beta_hat},
                       {"min_ratio": worst_ratio, "thresholds_satisfied": ok_thr})


def check_equivalence_at_solution(prob, result, tol=1e-4, *, variant=None,
                                  beta=None, beta_hat=None, dir_tol=None,
                                  feas_tol=None, stat_tol=None):
    """Small variant direction must certify approximate bilevel stationarity.

    ``result`` is a :class:`~cdbilevel.solvers.RunResult` (variant and
    penalties are then read from its config) or an ``(x, y)`` pair. Passes
    iff ``||dir|| <= dir_tol`` implies ``feas <= feas_tol`` and
    ``stat_x <= stat_tol``; all three default to ``tol``.
    """
    if isinstance(result, tuple):
        x, y = result
    else:
        x, y = result.x, result.y
        cfg = result.config
        variant = variant or {"alg1_basic": "hat_Dh", "alg2_modified": "hat_Ds",
                              "alg3_inexact": "hat_Dp",
                              "exact_dh_descent": "exact_Dh"}[cfg.algorithm]
        beta = cfg.beta if beta is None else beta
        beta_hat = cfg.beta_hat if beta_hat is None else beta_hat
    variant = variant or "hat_Dh"
    if beta is None:
        beta = resolve_config(SolverConfig(_VARIANT_ALG.get(variant, "alg1_basic")),
                              prob.constants).beta
    dir_tol = tol if dir_tol is None else dir_tol
    feas_tol = tol if feas_tol is None else feas_tol
    stat_tol = tol if stat_tol is None else stat_tol
    el = _variant_element(prob, variant, x, y, beta, beta_hat)
    feas, stat_x = stationarity_measure(prob, x, y, 0.0)
    small = el.dir_norm <= dir_tol
    feasible, stationary = feas <= feas_tol, stat_x <= stat_tol
    holds = (not small) or (feasible and stationary)
    if small:
        margin = min(feas_tol - feas, stat_tol - stat_x)
    else:
        margin = el.dir_norm - dir_tol
    return CheckReport("equivalence", bool(holds), 1, float(margin),
                       {"dir_tol": dir_tol, "feas_tol": feas_tol,
                        "stat_tol": stat_tol, "variant": variant},
                       {"dir_norm": el.dir_norm, "feas": feas, "stat_x": stat_x,
                        "small_direction": small, "feasible": feasible,
                        "stationary": stationary})


def check_boundedness(prob, beta, points, phi_inf=None,
                      slack=BOUNDEDNESS_SLACK):
    """``h(x, y) >= inf Phi - 1e-9`` on the sample, for ``beta >= M_f Q_g / mu^3``."""
    c = prob.constants
    phi_inf = getattr(prob, "phi_inf", None) if phi_inf is None else phi_inf
    if phi_inf is None:
        raise ValueError("inf Phi is unknown for this problem")
    worst = np.inf
    for x, y in points:
        worst = min(worst, h_value(prob, x, y, beta) - phi_inf + slack)
    need = c.m_f * c.q_g / c.mu ** 3
    return CheckReport("boundedness", worst >= 0, len(points), worst,
                       {"phi_inf": phi_inf, "beta": beta},
                       {"beta_threshold": need, "thresholds_satisfied": beta >= need})


def _inv_apply(prob, x, y, u):
    return cg_solve(prob.hess_yy(x, y), u, 0.0)[0]


def check_inverse_hessian_lipschitz(prob, points, t_values=(1e-4, 1e-5),
                                    probes=20, seed=0):
    """Finite-difference Lipschitz ratio of ``hess_yy^{-1}`` against ``Q_g/mu^2``.

    The operator-norm difference is estimated from ``probes`` random unit
    vectors; slack is ``10 (Q_g/mu^2) t ||d|| + 1e-8``.
    """
    c = prob.constants
    bound = c.q_g / c.mu ** 2
    rng = check_random_state(seed)
    worst, worst_ratio = np.inf, 0.0
    for x, y in points:
        d = rng.standard_normal(prob.n + prob.p)
        d /= np.linalg.norm(d)
        us = rng.standard_normal((probes, prob.p))
        us /= np.linalg.norm(us, axis=1)[:, None]
        base = [_inv_apply(prob, x, y, u) for u in us]
        for t in t_values:
            xt, yt = x + t * d[:prob.n], y + t * d[prob.n:]
            diff = max(float(np.linalg.norm(_inv_apply(prob, xt, yt, u) - b0))
                       for u, b0 in zip(us, base))
            ratio = diff / t
            slack = 10.0 * bound * t + 1e-8
            worst = min(worst, bound + slack - ratio)
            worst_ratio = max(worst_ratio, ratio)
    return CheckReport("inverse_hessian_lipschitz", worst >= 0, len(points),
                       worst, {"Q_g/mu^2": bound}, {"max_ratio": worst_ratio})


def check_fA_directional(prob, points, t_values=(1e-4, 1e-5), seed=0):
    """Directional growth of ``f(x, A(x, .))`` against ``(M_f Q_g/mu^2)||grad||``.

    At each point and random unit ``d`` checks
    ``|f(x, A(x, y + t d)) - f(x, A(x, y))| / t <= (M_f Q_g / mu^2) ||grad|| +
    slack(t)`` with ``slack(t) = 10 (M_f Q_g L_g/mu^2 + M_f Q_g/mu) t`` plus a
    ``1e-7 (1 + M_f)`` floor for inner-solve rounding.
    """
    c = prob.constants
    coef = c.m_f * c.q_g / c.mu ** 2
    rng = check_random_state(seed)
    worst = np.inf
    for x, y in points:
        d = rng.standard_normal(prob.p)
        d /= np.linalg.norm(d)
        f0 = prob.f_value(x, newton_map(prob, x, y, 0.0).a_y)
        feas = float(np.linalg.norm(prob.grad_y_g(x, y)))
        for t in t_values:
            ft = prob.f_value(x, newton_map(prob, x, y + t * d, 0.0).a_y)
            lhs = abs(ft - f0) / t
            slack = 10.0 * (c.m_f * c.q_g * c.l_g / c.mu ** 2
                            + c.m_f * c.q_g / c.mu) * t + 1e-7 * (1.0 + c.m_f)
            worst = min(worst, coef * feas + slack - lhs)
    return CheckReport("fA_directional", worst >= 0, len(points), worst,
                       {"M_fQ_g/mu^2": coef})


def _validation_report(prob, seed):
    rep = validate_problem(prob, samples=10, seed=seed)
    worst = min((ch["limit"] - ch["worst"]) for ch in rep.checks
                if ch.get("worst") is not None) if rep.usable else -np.inf
    return CheckReport("validate_problem", rep.passed, 10, float(worst), {},
                       {"failed": rep.failed_checks(),
                        "failed_oracle": rep.failed_oracle,
                        "rayleigh_range": list(rep.rayleigh_range)})


def run_battery(prob, points=100, seed=0, radius=1.0, far_radius=10.0):
    """Run every applicable check; returns ``{name: CheckReport}``.

    Penalties are the solver defaults (1.01 times each threshold, see
    :func:`~cdbilevel.solvers.resolve_config`). Checks whose preconditions
    fail (no third-order oracles, nonsmooth ``f`` for the gradient check,
    unknown ``inf Phi``) are skipped.
    """
    c = prob.constants
    pts = sample_points(prob, points, seed, radius)
    far = sample_points(prob, max(points // 4, 1), seed + 1, far_radius)
    betas = {alg: resolve_config(SolverConfig(alg), c)
             for alg in ("alg1_basic", "alg2_modified", "alg3_inexact")}
    beta1 = betas["alg1_basic"].beta
    out = {"validate_problem": _validation_report(prob, seed)}
    if out["validate_problem"].details["failed_oracle"] is not None:
        return out

    def add(key, fn, *args, **kw):
        # a broken oracle can make a check crash rather than fail; record both
        try:
            out[key] = fn(*args, **kw)
        except Exception as exc:  # noqa: BLE001
            out[key] = CheckReport(key, False, 0, -np.inf, {},
                                    {"error": f"{type(exc).__name__}: {exc}"})

    third = prob.has_third_order
    if third and getattr(prob, "smooth_upper", False):
        add("gradient_fd", check_gradient_fd, prob, beta1, pts)
    if third:
        add("contraction", check_contraction, prob, pts)
        add("contraction_far", check_contraction, prob, far,
            name="contraction_far")
        cfg2 = betas["alg2_modified"]
        add("descent_hat_Dh", check_descent, prob, "hat_Dh", beta1, points=pts)
        add("descent_hat_Ds", check_descent, prob, "hat_Ds", cfg2.beta,
            cfg2.beta_hat, points=pts)
        add("descent_hat_Dp", check_descent, prob, "hat_Dp",
            betas["alg3_inexact"].beta, points=pts)
    if getattr(prob, "phi_inf", None) is not None:
        add("boundedness", check_boundedness, prob, beta1, pts)
    add("inverse_hessian_lipschitz", check_inverse_hessian_lipschitz, prob,
        pts[: max(points // 5, 1)], seed=seed)
    add("fA_directional", check_fA_directional, prob, pts, seed=seed)
    x_star = getattr(prob, "x_star", None)
    if x_star is not None and hasattr(prob, "y_star"):
        add("equivalence", check_equivalence_at_solution, prob,
            (x_star, prob.y_star(x_star)), 1e-8, beta=beta1)
    return out
