import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cdbilevel.estimator import CDBSolver


def test_params_round_trip():
    est = CDBSolver(algorithm="alg3_inexact", beta=2.0, max_iters=5)
    params = est.get_params()
    assert params["algorithm"] == "alg3_inexact" and params["beta"] == 2.0
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(max_iters=7)
    assert est.max_iters == 7


def test_fit_sets_attributes(qll_smooth):
    est = CDBSolver(max_iters=20, record_trace=True).fit(qll_smooth)
    assert est.status_ == "max_iters" and est.n_iter_ == 20
    assert len(est.trace_) == 20
    assert est.x_.shape == (5,) and est.y_.shape == (5,)
    assert est.config_.beta == 1.0
    assert not est.converged_


def test_fit_converges_and_scores(qll_smooth):
    est = CDBSolver(algorithm="alg3_inexact").fit(qll_smooth)
    assert est.converged_
    assert np.linalg.norm(est.x_ - qll_smooth.x_star) <= 1e-4
    assert -1e-4 <= est.score(qll_smooth) <= 0


def test_unfitted_and_bad_input(qll_smooth):
    with pytest.raises(NotFittedError):
        CDBSolver().score(qll_smooth)
    with pytest.raises(TypeError):
        CDBSolver().fit(np.zeros((3, 3)))


def test_to_config_matches_params():
    cfg = CDBSolver(eta0=0.3, step_exponent=0.9, tol2_exponent=0.4).to_config()
    assert cfg.step.scale == 0.3 and cfg.step.exponent == 0.9
    assert cfg.tol2.exponent == 0.4
