import numpy as np
import pytest

from cdbilevel.problems import build_nqll, build_qll, build_scalar_nonsmooth


@pytest.fixture(scope="session")
def qll_smooth():
    return build_qll(5, 5, seed=0, upper="smooth")


@pytest.fixture(scope="session")
def qll_l1():
    return build_qll(5, 5, seed=0, upper="l1")


@pytest.fixture(scope="session")
def nqll():
    return build_nqll(10, 10, seed=0)


@pytest.fixture(scope="session")
def nqll_small():
    return build_nqll(4, 3, seed=1)


@pytest.fixture(scope="session")
def scalar():
    return build_scalar_nonsmooth()


def random_spd(rng, p, lo=1.0, hi=10.0):
    Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
    return (Q * rng.uniform(lo, hi, p)) @ Q.T


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
