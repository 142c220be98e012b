"""Built-in analytic bilevel problems.

``qll``
    Quadratic lower level ``g = 1/2 y'Ay + x'By + c'y``; ``Q_g = 0`` and
    ``y*(x) = -A^{-1}(B'x + c)`` in closed form.
``nqll``
    Non-quadratic lower level ``g = mu/2 ||y||^2 + sum_i log cosh(a_i'y +
    b_i'x + e_i)`` whose derivatives of every order are globally bounded, so
    all constants are certifiable.
``scalar``
    The hand-checkable one-dimensional problem ``f = |y - 1|`` (optionally
    ``+ |x|``), ``g = 1/2 (y - x)^2``.

Nonsmooth upper levels are coordinatewise l1 pieces whose field element is
the sign selection with ``sign(0) = -1``.
"""
from __future__ import annotations

import numpy as np

from ._validation import check_count, check_random_state, check_scalar
from .linalg import LinearOperator
from .problem import BilevelProblem, ProblemConstants, validate_problem

__all__ = [
    "PresetProblem",
    "QuadraticLowerLevelProblem",
    "LogCoshLowerLevelProblem",
    "ScalarNonsmoothProblem",
    "CorruptedProblem",
    "build_qll",
    "build_nqll",
    "build_scalar_nonsmooth",
    "build_preset",
    "PRESETS",
    "sign_selection",
]

# max of |d/ds sech^2(s)| = |2 sech^2 tanh|, attained at tanh(s) = 1/sqrt(3)
_LOGCOSH_THIRD_MAX = 4.0 / (3.0 * np.sqrt(3.0))
# half-width of the box on which the quadratic upper level's M_f is valid
QUADRATIC_UPPER_RADIUS = 30.0


def sign_selection(r):
    """Deterministic element of the subdifferential of ``|.|``, sign(0) = -1."""
    return np.where(r > 0, 1.0, -1.0)


def _logcosh(s):
    a = np.abs(s)
    return a + np.log1p(np.exp(-2.0 * a)) - np.log(2.0)


# --- upper levels -----------------------------------------------------------

class _Upper:
    smooth = True

    def value(self, x, y):
        raise NotImplementedError

    def element(self, x, y):
        raise NotImplementedError


class _L1Upper(_Upper):
    smooth = False

    def __init__(self, x_bar, y_bar):
        self.x_bar, self.y_bar = x_bar, y_bar
        self.m_f = float(np.sqrt(x_bar.size + y_bar.size))

    def value(self, x, y):
        return float(np.abs(x - self.x_bar).sum() + np.abs(y - self.y_bar).sum())

    def element(self, x, y):
        return sign_selection(x - self.x_bar), sign_selection(y - self.y_bar)


class _QuadraticUpper(_Upper):
    def __init__(self, x_bar, y_bar, radius=QUADRATIC_UPPER_RADIUS):
        self.x_bar, self.y_bar = x_bar, y_bar
        # Lipschitz only locally: bound over the box of half-width `radius`
        self.m_f = float(np.linalg.norm(np.concatenate(
            [np.abs(x_bar), np.abs(y_bar)]) + radius))

    def value(self, x, y):
        rx, ry = x - self.x_bar, y - self.y_bar
        return 0.5 * float(rx @ rx + ry @ ry)

    def element(self, x, y):
        return x - self.x_bar, y - self.y_bar


class _LinearUpper(_Upper):
    def __init__(self, cx, cy):
        self.cx, self.cy = cx, cy
        self.m_f = float(np.hypot(np.linalg.norm(cx), np.linalg.norm(cy)))

    def value(self, x, y):
        return float(self.cx @ x + self.cy @ y)

    def element(self, x, y):
        return self.cx.copy(), self.cy.copy()


class _LogCoshUpper(_Upper):
    def __init__(self, x_bar, y_bar):
        self.x_bar, self.y_bar = x_bar, y_bar
        self.m_f = float(np.sqrt(x_bar.size + y_bar.size))

    def value(self, x, y):
        return float(_logcosh(x - self.x_bar).sum()
                     + _logcosh(y - self.y_bar).sum())

    def element(self, x, y):
        return np.tanh(x - self.x_bar), np.tanh(y - self.y_bar)


# --- problems ---------------------------------------------------------------

class PresetProblem(BilevelProblem):
    """A built-in problem carrying analytic side information.

    Attributes
    ----------
    name : str
    params : dict
        Builder parameters, enough to rebuild the instance.
    x_star : ndarray or None
        A minimizer of ``Phi(x) = f(x, y*(x))`` at which the deterministic
        field selection vanishes, when one is known.
    phi_inf : float or None
        ``inf Phi`` when known.
    smooth_upper : bool
        Whether ``f`` is continuously differentiable.
    """

    name = "preset"
    x_star = None
    phi_inf = None
    stationary_box = None

    def __init__(self, upper):
        self._upper = upper
        self.smooth_upper = upper.smooth

    def f_value(self, x, y):
        return self._upper.value(x, y)

    def df_element(self, x, y):
        return self._upper.element(x, y)

    def y_star(self, x):
        raise NotImplementedError

    def phi(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.f_value(x, self.y_star(x))

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"{self.name}({args})"


class QuadraticLowerLevelProblem(PresetProblem):
    name = "qll"

    def __init__(self, A, B, c, upper, params=None):
        super().__init__(upper)
        self.A = np.array(A, dtype=np.float64)
        self.B = np.array(B, dtype=np.float64)
        self.c = np.array(c, dtype=np.float64)
        self.p = self.A.shape[0]
        self.n = self.B.shape[0]
        self.params = dict(params or {})
        eig = np.linalg.eigvalsh(self.A)
        full = np.block([[np.zeros((self.n, self.n)), self.B],
                         [self.B.T, self.A]])
        l_g = max(float(np.max(np.abs(np.linalg.eigvalsh(full)))), eig[-1])
        self.constants = ProblemConstants(
            mu=float(eig[0]), l_g=l_g, q_g=0.0, m_f=upper.m_f)
        self._H = LinearOperator.from_matrix(self.A)
        self._Bxy = LinearOperator.from_matrix(self.B)
        self._Byx = LinearOperator.from_matrix(self.B.T)
        self._zero_xy = LinearOperator.zeros(self.p, self.n)
        self._zero_yy = LinearOperator.zeros(self.p, self.p)

    def g_value(self, x, y):
        return float(0.5 * y @ (self.A @ y) + x @ (self.B @ y) + self.c @ y)

    def grad_y_g(self, x, y):
        return self.A @ y + self.B.T @ x + self.c

    def hess_yy(self, x, y):
        return self._H

    def hess_xy(self, x, y):
        return self._Bxy

    def hess_yx(self, x, y):
        return self._Byx

    def third_xyy(self, x, y, d):
        return self._zero_xy

    def third_yyy(self, x, y, d):
        return self._zero_yy

    def y_star(self, x):
        return -np.linalg.solve(self.A, self.B.T @ np.asarray(x) + self.c)


class LogCoshLowerLevelProblem(PresetProblem):
    name = "nqll"

    def __init__(self, mu, a, b, e, upper, params=None):
        super().__init__(upper)
        self.mu = float(mu)
        self.a = np.array(a, dtype=np.float64)      # (m, p)
        self.b = np.array(b, dtype=np.float64)      # (m, n)
        self.e = np.array(e, dtype=np.float64)      # (m,)
        self.p = self.a.shape[1]
        self.n = self.b.shape[1]
        self.params = dict(params or {})
        C = np.hstack([self.b, self.a])
        gram = float(np.linalg.norm(C, 2) ** 2) if C.size else 0.0
        rows = np.linalg.norm(C, axis=1) if C.size else np.zeros(1)
        q_g = _LOGCOSH_THIRD_MAX * min(float(np.sum(rows ** 3)),
                                       float(rows.max()) * gram)
        self.constants = ProblemConstants(
            mu=self.mu, l_g=self.mu + gram, q_g=float(q_g), m_f=upper.m_f)

    def _s(self, x, y):
        return self.a @ y + self.b @ x + self.e

    def g_value(self, x, y):
        return float(0.5 * self.mu * y @ y + _logcosh(self._s(x, y)).sum())

    def grad_y_g(self, x, y):
        return self.mu * y + self.a.T @ np.tanh(self._s(x, y))

    def _sech2(self, x, y):
        return 1.0 / np.cosh(self._s(x, y)) ** 2

    def hess_yy(self, x, y):
        w = self._sech2(x, y)
        H = self.mu * np.eye(self.p) + self.a.T @ (w[:, None] * self.a)
        return LinearOperator.from_matrix(H)

    def hess_xy(self, x, y):
        w = self._sech2(x, y)
        return LinearOperator.from_matrix(self.b.T @ (w[:, None] * self.a))

    def hess_yx(self, x, y):
        w = self._sech2(x, y)
        return LinearOperator.from_matrix(self.a.T @ (w[:, None] * self.b))

    def _third_weights(self, x, y, d):
        s = self._s(x, y)
        t = np.tanh(s)
        return -2.0 * (1.0 - t * t) * t * (self.a @ np.asarray(d, dtype=np.float64))

    def third_xyy(self, x, y, d):
        w = self._third_weights(x, y, d)
        return LinearOperator.from_matrix(self.b.T @ (w[:, None] * self.a))

    def third_yyy(self, x, y, d):
        w = self._third_weights(x, y, d)
        return LinearOperator.from_matrix(self.a.T @ (w[:, None] * self.a))

    def y_star(self, x, tol=1e-12, max_iter=50):
        """Damped Newton on ``g(x, .)`` to ``||grad_y g|| <= tol``."""
        x = np.asarray(x, dtype=np.float64)
        y = np.zeros(self.p)
        for _ in range(max_iter):
            G = self.grad_y_g(x, y)
            if np.linalg.norm(G) <= tol:
                return y
            H = self.hess_yy(x, y).matrix
            step = np.linalg.solve(H, G)
            g0, slope, t = self.g_value(x, y), float(G @ step), 1.0
            gnorm = np.linalg.norm(G)
            while t > 1e-12:
                trial = y - t * step
                # near the solution g stalls at rounding level; fall back on
                # gradient-norm decrease
                if (self.g_value(x, trial) <= g0 - 1e-4 * t * slope
                        or np.linalg.norm(self.grad_y_g(x, trial)) < gnorm):
                    break
                t *= 0.5
            y = y - t * step
        if np.linalg.norm(self.grad_y_g(x, y)) > tol:
            raise RuntimeError("damped Newton for y*(x) did not converge")
        return y


class ScalarNonsmoothProblem(PresetProblem):
    """``f = |y - 1| (+ |x|)``, ``g = 1/2 (y - x)^2`` with ``n = p = 1``.

    ``A(x, y) = x = y*(x)`` for every ``y``, so ``h(x, y) = |x - 1| (+ |x|) +
    beta/2 (y - x)^2`` and ``Phi(x) = |x - 1| (+ |x|)``.
    """

    name = "scalar"
    n = 1
    p = 1

    def __init__(self, with_x_term=False):
        self.with_x_term = bool(with_x_term)
        self.smooth_upper = False
        self.params = {"with_x_term": self.with_x_term}
        self.constants = ProblemConstants(
            mu=1.0, l_g=2.0, q_g=0.0,
            m_f=float(np.sqrt(2.0)) if self.with_x_term else 1.0)
        self._H = LinearOperator.from_matrix([[1.0]])
        self._Bxy = LinearOperator.from_matrix([[-1.0]])
        self.phi_inf = 1.0 if self.with_x_term else 0.0
        if self.with_x_term:
            # Phi is flat on [0, 1]; the sign selection vanishes inside
            self.x_star = np.array([0.5])
            self.stationary_box = (np.array([0.0]), np.array([1.0]))

    def f_value(self, x, y):
        val = abs(float(y[0]) - 1.0)
        if self.with_x_term:
            val += abs(float(x[0]))
        return val

    def df_element(self, x, y):
        d_x = sign_selection(x) if self.with_x_term else np.zeros(1)
        return d_x, sign_selection(y - 1.0)

    def g_value(self, x, y):
        return 0.5 * float(y[0] - x[0]) ** 2

    def grad_y_g(self, x, y):
        return np.asarray(y, dtype=np.float64) - np.asarray(x, dtype=np.float64)

    def hess_yy(self, x, y):
        return self._H

    def hess_xy(self, x, y):
        return self._Bxy

    def third_xyy(self, x, y, d):
        return LinearOperator.zeros(1, 1)

    def third_yyy(self, x, y, d):
        return LinearOperator.zeros(1, 1)

    def y_star(self, x):
        return np.array(x, dtype=np.float64)


class CorruptedProblem(BilevelProblem):
    """Wrap a problem and break one oracle, for negative controls.

    Modes: ``grad_scale`` (``grad_y_g`` doubled), ``hess_zero``
    (``hess_yy`` replaced by zero), ``third_yyy_sign`` / ``third_xyy_sign``
    (third-order operator negated, which flips the sign of the Jacobian
    correction of the dissolving map).
    """

    MODES = ("grad_scale", "hess_zero", "third_yyy_sign", "third_xyy_sign")

    def __init__(self, base, mode):
        if mode not in self.MODES:
            raise ValueError(f"unknown corruption {mode!r}; choose from {self.MODES}")
        self.base, self.mode = base, mode
        self.n, self.p, self.constants = base.n, base.p, base.constants
        self.name = getattr(base, "name", "problem")
        self.params = dict(getattr(base, "params", {}), corrupt=mode)
        for attr in ("x_star", "phi_inf", "smooth_upper", "y_star", "phi"):
            if hasattr(base, attr):
                setattr(self, attr, getattr(base, attr))

    @property
    def has_third_order(self):
        return self.base.has_third_order

    def f_value(self, x, y):
        return self.base.f_value(x, y)

    def df_element(self, x, y):
        return self.base.df_element(x, y)

    def g_value(self, x, y):
        return self.base.g_value(x, y)

    def grad_y_g(self, x, y):
        G = self.base.grad_y_g(x, y)
        return 2.0 * G if self.mode == "grad_scale" else G

    def hess_yy(self, x, y):
        if self.mode == "hess_zero":
            return LinearOperator.zeros(self.p, self.p)
        return self.base.hess_yy(x, y)

    def hess_xy(self, x, y):
        return self.base.hess_xy(x, y)

    def hess_yx(self, x, y):
        return self.base.hess_yx(x, y)

    def _neg(self, op):
        return LinearOperator(op.dim_in, op.dim_out, lambda v: -op.apply(v),
                              None if op.matrix is None else -op.matrix)

    def third_xyy(self, x, y, d):
        op = self.base.third_xyy(x, y, d)
        return self._neg(op) if self.mode == "third_xyy_sign" else op

    def third_yyy(self, x, y, d):
        op = self.base.third_yyy(x, y, d)
        return self._neg(op) if self.mode == "third_yyy_sign" else op


# --- builders ---------------------------------------------------------------

def _certify(prob, certify):
    if certify:
        report = validate_problem(prob, samples=int(certify), seed=12345)
        if not report.passed:
            raise ValueError(f"{prob.name} failed certification: "
                             f"{report.failed_checks()}")
    return prob


def build_qll(n=5, p=5, seed=0, upper="smooth", coupling=None, mu=1.0,
              cond=2.0, coupling_scale=0.5, gap=1.5, A=None, B=None, c=None,
              x_bar=None, y_bar=None, certify=4):
    """Quadratic lower-level problem.

    Parameters
    ----------
    n, p : int
        Dimensions of ``x`` and ``y``.
    seed : int
        Seed for every random quantity.
    upper : {"smooth", "l1", "linear"}
        ``smooth``: ``1/2||x - x_bar||^2 + 1/2||y - y_bar||^2`` (``M_f``
        valid on the box of half-width 30). ``l1``: ``||x - x_bar||_1 +
        ||y - y_bar||_1``. ``linear``: ``c_x'x + c_y'y``.
    coupling : {"random", "aligned"}, optional
        ``aligned`` sets ``B = -P A`` with ``P`` the ``n x p`` identity
        selector, so ``y*(x) = P'x - A^{-1}c``; with the l1 upper level this
        makes ``Phi`` flat on a box of side ``gap`` in each shared
        coordinate. Defaults to ``aligned`` for ``l1`` and ``random``
        otherwise.
    mu, cond : float
        Spectrum of ``A`` is ``linspace(mu, mu * cond, p)``.
    A, B, c, x_bar, y_bar : array_like, optional
        Explicit data overriding the random draws.
    certify : int
        Number of :func:`validate_problem` samples run at construction
        (0 disables).
    """
    n, p = check_count(n, "n"), check_count(p, "p")
    check_scalar(mu, "mu", min_val=0.0, include_min=False)
    check_scalar(cond, "cond", min_val=1.0)
    if upper not in ("smooth", "l1", "linear"):
        raise ValueError(f"unknown upper level {upper!r}")
    if coupling is None:
        coupling = "aligned" if upper == "l1" else "random"
    if coupling not in ("random", "aligned"):
        raise ValueError(f"unknown coupling {coupling!r}")
    rng = check_random_state(seed)

    if A is None:
        Q, _ = np.linalg.qr(rng.standard_normal((p, p)))
        A = (Q * np.linspace(mu, mu * cond, p)) @ Q.T
        A = 0.5 * (A + A.T)
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    P = np.eye(n, p)
    if B is None:
        if coupling == "aligned":
            B = -P @ A
        else:
            B = coupling_scale * rng.standard_normal((n, p)) / np.sqrt(p)
    B = np.atleast_2d(np.asarray(B, dtype=np.float64)).reshape(n, p)
    c = rng.standard_normal(p) if c is None else np.asarray(c, dtype=np.float64).reshape(p)

    params = dict(n=n, p=p, seed=seed, upper=upper, coupling=coupling, mu=mu,
                  cond=cond, coupling_scale=coupling_scale, gap=gap)
    k = -np.linalg.solve(A, c)              # y*(0)
    K = -np.linalg.solve(A, B.T)            # y*(x) = K x + k

    x_star = phi_inf = box = None
    if upper == "l1":
        if coupling == "aligned" and x_bar is None and y_bar is None:
            m = min(n, p)
            x_bar = 2.0 + rng.uniform(0.0, 1.0, n)
            y_bar = rng.standard_normal(p)
            # kink of |y*_j - y_bar_j| sits at x_j = x_bar_j - gap
            y_bar[:m] = x_bar[:m] - gap + k[:m]
        else:
            x_bar = rng.standard_normal(n) if x_bar is None else np.asarray(x_bar, float)
            y_bar = rng.standard_normal(p) if y_bar is None else np.asarray(y_bar, float)
        up = _L1Upper(np.asarray(x_bar, float), np.asarray(y_bar, float))
        if coupling == "aligned":
            m = min(n, p)
            phi_inf = gap * m + float(np.abs(k[n:] - up.y_bar[n:]).sum()) if p > n \
                else gap * m
            if n <= p:
                lo, hi = up.x_bar - gap, up.x_bar.copy()
                box = (lo, hi)
                x_star = 0.5 * (lo + hi)
    elif upper == "smooth":
        x_bar = rng.standard_normal(n) if x_bar is None else np.asarray(x_bar, float)
        y_bar = rng.standard_normal(p) if y_bar is None else np.asarray(y_bar, float)
        up = _QuadraticUpper(np.asarray(x_bar, float), np.asarray(y_bar, float))
        x_star = np.linalg.solve(np.eye(n) + K.T @ K,
                                 up.x_bar + K.T @ (up.y_bar - k))
    else:
        up = _LinearUpper(rng.standard_normal(n), rng.standard_normal(p))

    prob = QuadraticLowerLevelProblem(A, B, c, up, params)
    prob.x_star = x_star
    prob.stationary_box = box
    if x_star is not None:
        prob.phi_inf = prob.phi(x_star)
    elif phi_inf is not None:
        prob.phi_inf = float(phi_inf)
    return _certify(prob, certify)


def build_nqll(n=5, p=5, seed=0, upper="smooth", mu=1.0, terms=None,
               a_scale=0.5, b_scale=0.5, certify=4):
    """Log-cosh lower-level problem.

    ``g = mu/2 ||y||^2 + sum_i log cosh(a_i'y + b_i'x + e_i)`` with
    ``terms`` (default ``p``) rows ``a_i ~ N(0, a_scale^2/p)`` and
    ``b_i ~ N(0, b_scale^2/n)``. The upper level is ``smooth`` (sum of
    log cosh of the deviations) or ``l1``; in both cases ``y_bar = y*(x_bar)``
    so ``inf Phi = 0`` is attained at ``x_bar``.

    Constants: ``L_g = mu + ||C||_2^2`` and ``Q_g = (4/(3 sqrt 3)) min(sum
    ||c_i||^3, max ||c_i|| ||C||_2^2)`` with ``C = [b_i, a_i]`` stacked.
    """
    n, p = check_count(n, "n"), check_count(p, "p")
    check_scalar(mu, "mu", min_val=0.0, include_min=False)
    if upper not in ("smooth", "l1"):
        raise ValueError(f"unknown upper level {upper!r}")
    m = p if terms is None else check_count(terms, "terms")
    rng = check_random_state(seed)
    a = a_scale * rng.standard_normal((m, p)) / np.sqrt(p)
    b = b_scale * rng.standard_normal((m, n)) / np.sqrt(n)
    e = 0.5 * rng.standard_normal(m)
    x_bar = rng.standard_normal(n)
    params = dict(n=n, p=p, seed=seed, upper=upper, mu=mu, terms=m,
                  a_scale=a_scale, b_scale=b_scale)

    placeholder = _LogCoshUpper(x_bar, np.zeros(p))
    prob = LogCoshLowerLevelProblem(mu, a, b, e, placeholder, params)
    y_bar = prob.y_star(x_bar)
    up = _LogCoshUpper(x_bar, y_bar) if upper == "smooth" else _L1Upper(x_bar, y_bar)
    prob._upper = up
    prob.smooth_upper = up.smooth
    prob.constants = ProblemConstants(prob.constants.mu, prob.constants.l_g,
                                      prob.constants.q_g, up.m_f)
    prob.phi_inf = 0.0
    if up.smooth:
        prob.x_star = x_bar.copy()
    return _certify(prob, certify)


def build_scalar_nonsmooth(with_x_term=False, certify=4):
    return _certify(ScalarNonsmoothProblem(with_x_term), certify)


PRESETS = {
    "qll": build_qll,
    "nqll": build_nqll,
    "scalar": build_scalar_nonsmooth,
}


def build_preset(name, corrupt=None, **params):
    """Build a preset by name, optionally wrapped in :class:`CorruptedProblem`."""
    try:
        builder = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from "
                         f"{sorted(PRESETS)}") from None
    prob = builder(**params)
    if corrupt:
        prob = CorruptedProblem(prob, corrupt)
    return prob
