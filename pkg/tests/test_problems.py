import numpy as np
import pytest

from cdbilevel.problem import validate_problem
from cdbilevel.problems import (
    PRESETS,
    CorruptedProblem,
    build_nqll,
    build_preset,
    build_qll,
    build_scalar_nonsmooth,
    sign_selection,
)
from cdbilevel.core import stationarity_measure


def test_sign_selection_convention():
    np.testing.assert_array_equal(sign_selection(np.array([-2.0, 0.0, 3.0])), [-1, -1, 1])


def test_qll_ystar_residual(qll_smooth):
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.uniform(-10, 10, 5)
        assert np.linalg.norm(qll_smooth.grad_y_g(x, qll_smooth.y_star(x))) <= 1e-12 * (1 + np.linalg.norm(x))


def test_qll_constants_from_spectrum():
    prob = build_qll(3, 4, seed=1)
    A, B = prob.A, prob.B
    assert prob.constants.mu == pytest.approx(np.linalg.eigvalsh(A).min(), rel=1e-12)
    full = np.block([[np.zeros((3, 3)), B], [B.T, A]])
    assert prob.constants.l_g >= np.abs(np.linalg.eigvalsh(full)).max() - 1e-12
    assert prob.constants.q_g == 0.0


def test_qll_l1_constants(qll_l1):
    assert qll_l1.constants.m_f == pytest.approx(np.sqrt(10))
    assert not qll_l1.smooth_upper
    lo, hi = qll_l1.stationary_box
    # Phi is constant on the stationary box
    rng = np.random.default_rng(1)
    vals = [qll_l1.phi(lo + rng.uniform(0, 1, 5) * (hi - lo)) for _ in range(20)]
    np.testing.assert_allclose(vals, qll_l1.phi_inf, atol=1e-12)
    # and larger outside
    assert qll_l1.phi(hi + 0.5) > qll_l1.phi_inf + 0.1


def test_qll_smooth_minimizer_by_dense_algebra(qll_smooth):
    K = -np.linalg.solve(qll_smooth.A, qll_smooth.B.T)
    k = -np.linalg.solve(qll_smooth.A, qll_smooth.c)
    up = qll_smooth._upper
    # gradient of Phi(x) = 1/2||x - xb||^2 + 1/2||Kx + k - yb||^2
    xs = qll_smooth.x_star
    grad = xs - up.x_bar + K.T @ (K @ xs + k - up.y_bar)
    assert np.linalg.norm(grad) <= 1e-12


@pytest.mark.parametrize("builder", [lambda: build_qll(4, 6, seed=2),
                                     lambda: build_nqll(6, 4, seed=2),
                                     lambda: build_qll(3, 3, upper="l1"),
                                     lambda: build_nqll(3, 3, upper="l1"),
                                     build_scalar_nonsmooth])
def test_presets_certify(builder):
    assert validate_problem(builder(), samples=10, seed=3).passed


def test_nqll_degenerate_is_quadratic():
    prob = build_nqll(3, 3, seed=0, a_scale=0.0, mu=2.0)
    x, y = np.ones(3), np.arange(3.0)
    np.testing.assert_allclose(prob.hess_yy(x, y).to_dense(), 2 * np.eye(3), atol=1e-15)
    np.testing.assert_allclose(prob.hess_xy(x, y).to_dense(), 0, atol=1e-15)
    np.testing.assert_allclose(prob.y_star(x), 0, atol=1e-15)


def test_nqll_newton_ystar():
    prob = build_nqll(10, 10, seed=4)
    rng = np.random.default_rng(4)
    for _ in range(20):
        x = rng.uniform(-10, 10, 10)
        assert np.linalg.norm(prob.grad_y_g(x, prob.y_star(x, max_iter=50))) <= 1e-12


def test_nqll_has_minimizer_at_xbar(nqll):
    s = stationarity_measure(nqll, nqll.x_star, nqll.y_star(nqll.x_star))
    assert s.feas <= 1e-8 and s.stat_x <= 1e-8
    assert nqll.phi(nqll.x_star) == pytest.approx(0.0, abs=1e-20)


def test_scalar_variants():
    a = build_scalar_nonsmooth()
    assert a.phi(np.array([3.0])) == pytest.approx(2.0)
    b = build_scalar_nonsmooth(with_x_term=True)
    assert b.constants.m_f == pytest.approx(np.sqrt(2))
    assert b.phi(np.array([0.25])) == pytest.approx(1.0)
    assert b.x_star == pytest.approx(0.5)


def test_determinism():
    a, b = build_nqll(4, 4, seed=9), build_nqll(4, 4, seed=9)
    np.testing.assert_array_equal(a.a, b.a)
    np.testing.assert_array_equal(a.e, b.e)
    c, d = build_qll(4, 4, seed=9), build_qll(4, 4, seed=9)
    np.testing.assert_array_equal(c.A, d.A)


def test_build_preset_and_errors():
    assert set(PRESETS) == {"qll", "nqll", "scalar"}
    prob = build_preset("qll", n=2, p=2, corrupt="grad_scale")
    assert isinstance(prob, CorruptedProblem)
    with pytest.raises(ValueError):
        build_preset("nope")
    with pytest.raises(ValueError):
        build_qll(upper="cubic")
    with pytest.raises(ValueError):
        build_qll(n=0)
    with pytest.raises(ValueError):
        CorruptedProblem(build_qll(2, 2), "bogus")
