import json
from dataclasses import replace

import numpy as np
import pytest

from cdbilevel.core import UnsupportedOperationError
from cdbilevel.diagnostics import (
    CheckReport,
    check_boundedness,
    check_contraction,
    check_descent,
    check_equivalence_at_solution,
    check_fA_directional,
    check_gradient_fd,
    check_inverse_hessian_lipschitz,
    damped_newton_ystar,
    descent_constant,
    run_battery,
    sample_points,
)
from cdbilevel.problems import CorruptedProblem, build_nqll, build_qll
from cdbilevel.solvers import SolverConfig, resolve_config, run
from test_core import XOnlyUpper


def beta_for(prob, alg):
    return resolve_config(SolverConfig(alg), prob.constants)


def test_sample_points_cell(nqll):
    pts = sample_points(nqll, 50, seed=1, radius=2.0)
    assert len(pts) == 50
    assert max(np.abs(np.concatenate(p)).max() for p in pts) <= 6.0
    again = sample_points(nqll, 50, seed=1, radius=2.0)
    assert all(np.array_equal(a[0], b[0]) for a, b in zip(pts, again))


def test_damped_newton_matches_preset(nqll):
    x = np.linspace(-3, 3, 10)
    np.testing.assert_allclose(damped_newton_ystar(nqll, x), nqll.y_star(x), atol=1e-11)


def test_gradient_fd_qll(qll_smooth):
    rep = check_gradient_fd(qll_smooth, 1.0, sample_points(qll_smooth, 30, 0))
    assert rep.passed and rep.details["max_rel_err"] <= 1e-5


def test_gradient_fd_detects_sign_flip():
    prob = build_nqll(4, 4, seed=1)
    pts = sample_points(prob, 10, 0)
    beta = beta_for(prob, "alg1_basic").beta
    assert check_gradient_fd(prob, beta, pts).passed
    bad = CorruptedProblem(prob, "third_yyy_sign")
    assert not check_gradient_fd(bad, beta, pts).passed


def test_gradient_fd_needs_third_order():
    with pytest.raises(UnsupportedOperationError):
        check_gradient_fd(XOnlyUpper(), 1.0, [(np.zeros(2), np.zeros(2))])


def test_contraction_quadratic_exact(qll_smooth):
    rep = check_contraction(qll_smooth, sample_points(qll_smooth, 20, 0))
    assert rep.passed and rep.details["gap_at_worst"] <= 1e-10


def test_contraction_nqll_near_and_far(nqll):
    assert check_contraction(nqll, sample_points(nqll, 100, 3)).passed
    far = check_contraction(nqll, sample_points(nqll, 30, 4, radius=20.0))
    assert far.passed and far.details["max_feas"] > 50


def test_contraction_detects_corruption(qll_smooth):
    assert not check_contraction(CorruptedProblem(qll_smooth, "grad_scale"),
                                 sample_points(qll_smooth, 5, 0)).passed


def test_descent_constants(nqll):
    c = nqll.constants
    assert descent_constant(c, "hat_Dh") == min(1, (2 - np.sqrt(2)) * c.mu / 2)
    assert descent_constant(c, "hat_Ds", 2.0, 4.0) == pytest.approx(min(0.25, 4 / 256))
    assert descent_constant(c, "hat_Dp") == min(c.mu ** 2 / (4 * c.l_g ** 2), c.mu / 4)
    with pytest.raises(ValueError):
        descent_constant(c, "hat_Dq")


def test_descent_quadratic_with_mu_constant(qll_smooth):
    pts = sample_points(qll_smooth, 30, 2)
    rep = check_descent(qll_smooth, "hat_Dh", 1.0, points=pts,
                        delta=min(1.0, qll_smooth.constants.mu))
    assert rep.passed


@pytest.mark.parametrize("variant,alg", [("hat_Dh", "alg1_basic"),
                                         ("hat_Ds", "alg2_modified"),
                                         ("hat_Dp", "alg3_inexact")])
def test_descent_nqll(nqll, variant, alg):
    cfg = beta_for(nqll, alg)
    rep = check_descent(nqll, variant, cfg.beta, cfg.beta_hat,
                        points=sample_points(nqll, 100, 5))
    assert rep.passed and rep.details["thresholds_satisfied"]
    # sensitivity: an impossible constant must flip the verdict
    bad = check_descent(nqll, variant, cfg.beta, cfg.beta_hat,
                        points=sample_points(nqll, 5, 5), delta=50.0)
    assert not bad.passed


def test_descent_sub_threshold_negative_control(nqll):
    # hypothesis violated: the verdict is recorded, not asserted
    rep = check_descent(nqll, "hat_Dp", 1e-3, points=sample_points(nqll, 20, 6))
    assert rep.details["thresholds_satisfied"] is False
    assert isinstance(rep.passed, bool)


def test_descent_hat_ds_needs_beta_hat(nqll):
    with pytest.raises(ValueError):
        check_descent(nqll, "hat_Ds", 1.0, points=[])


def test_equivalence_after_alg1_run(qll_l1):
    res = run(qll_l1, SolverConfig("alg1_basic", max_iters=100_000))
    rep = check_equivalence_at_solution(qll_l1, res, 1e-4)
    assert rep.passed and rep.details["small_direction"]


def test_equivalence_hand_placed(qll_smooth):
    xs = qll_smooth.x_star
    ys = qll_smooth.y_star(xs)
    assert check_equivalence_at_solution(qll_smooth, (xs, ys), 1e-8, beta=1.0).passed
    # infeasible point with hypergradient residual ~ 0 but feas = O(1e-2)
    y_off = ys + 1e-2
    rep = check_equivalence_at_solution(qll_smooth, (xs, y_off), beta=1.0,
                                        dir_tol=1.0, feas_tol=1e-4, stat_tol=1.0)
    assert not rep.passed
    assert rep.details["small_direction"] and not rep.details["feasible"]
    assert rep.details["stationary"]


def test_boundedness(qll_smooth, nqll):
    assert check_boundedness(qll_smooth, 1.0, sample_points(qll_smooth, 50, 0)).passed
    beta = beta_for(nqll, "alg1_basic").beta
    rep = check_boundedness(nqll, beta, sample_points(nqll, 50, 0))
    assert rep.passed and rep.details["thresholds_satisfied"]
    # feasible points give h = Phi
    x = np.ones(5)
    pt = [(x, qll_smooth.y_star(x))]
    rep = check_boundedness(qll_smooth, 1.0, pt)
    assert rep.worst_margin == pytest.approx(qll_smooth.phi(x) - qll_smooth.phi_inf + 1e-9)
    assert not check_boundedness(qll_smooth, 1.0, pt, phi_inf=1e6).passed
    with pytest.raises(ValueError):
        check_boundedness(XOnlyUpper(), 1.0, pt)


def test_inverse_hessian_lipschitz(qll_smooth, nqll):
    rep = check_inverse_hessian_lipschitz(qll_smooth, sample_points(qll_smooth, 5, 0))
    assert rep.passed and rep.details["max_ratio"] <= 1e-8
    pts = sample_points(nqll, 10, 1)
    assert check_inverse_hessian_lipschitz(nqll, pts, t_values=(1e-4,)).passed
    assert check_inverse_hessian_lipschitz(nqll, pts, t_values=(1e-5,)).passed
    # understated Q_g must be caught
    weak = nqll.clone()
    weak.constants = replace(nqll.constants, q_g=1e-6)
    assert not check_inverse_hessian_lipschitz(weak, pts).passed


def test_fA_directional(qll_smooth, nqll):
    assert check_fA_directional(qll_smooth, sample_points(qll_smooth, 10, 0)).passed
    assert check_fA_directional(nqll, sample_points(nqll, 30, 0)).passed


def test_battery_and_serialization(nqll_small):
    reps = run_battery(nqll_small, points=10)
    assert all(r.passed for r in reps.values())
    assert {"gradient_fd", "contraction", "descent_hat_Dp", "boundedness"} <= set(reps)
    for r in reps.values():
        json.dumps(r.to_dict(), allow_nan=False)


def test_battery_corrupted_fails(qll_smooth):
    reps = run_battery(CorruptedProblem(qll_smooth, "grad_scale"), points=10)
    assert not reps["validate_problem"].passed
    assert not reps["gradient_fd"].passed


def test_battery_crashing_check_recorded(qll_smooth):
    reps = run_battery(CorruptedProblem(qll_smooth, "hess_zero"), points=5)
    assert not reps["contraction"].passed
    assert "error" in reps["contraction"].details
    assert reps["contraction"].to_dict()["worst_margin"] is None


def test_report_to_dict_types():
    d = CheckReport("x", True, 3, np.float64(0.5), {"a": np.float64(1)},
                    {"v": np.arange(2)}).to_dict()
    assert json.loads(json.dumps(d))["details"]["v"] == [0, 1]
