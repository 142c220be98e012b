"""Oracle interface for nonconvex / strongly convex bilevel problems.

A problem couples an upper-level objective ``f(x, y)`` (possibly nonsmooth,
accessed through one deterministic element of its conservative field) with a
lower-level objective ``g(x, y)`` that is ``mu``-strongly convex in ``y``.
Second-order blocks of ``g`` are exposed as matrix-free operators; third-order
directional operators are optional and only consumed by diagnostics.
"""
from __future__ import annotations

import copy
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ._validation import check_count, check_random_state
from .linalg import LinearOperator

__all__ = [
    "ProblemConstants",
    "BilevelProblem",
    "OracleError",
    "ValidationReport",
    "validate_problem",
]


class OracleError(RuntimeError):
    """A problem oracle raised or returned something unusable."""

    def __init__(self, oracle, cause):
        super().__init__(f"oracle {oracle!r} failed: {cause}")
        self.oracle = oracle
        self.cause = cause


@dataclass(frozen=True)
class ProblemConstants:
    """Regularity constants of a bilevel problem.

    Attributes
    ----------
    mu : float
        Strong convexity modulus of ``g`` in ``y``.
    l_g : float
        Lipschitz constant of the full gradient of ``g``.
    q_g : float
        Lipschitz constant of the Hessian blocks ``hess_yy`` and ``hess_xy``.
    m_f : float
        Lipschitz constant of ``f``; bounds every element returned by
        ``df_element``.
    """

    mu: float
    l_g: float
    q_g: float
    m_f: float

    def __post_init__(self):
        for name in ("mu", "l_g", "q_g", "m_f"):
            v = getattr(self, name)
            if not np.isfinite(v):
                raise ValueError(f"{name} must be finite")
        if self.mu <= 0:
            raise ValueError("mu must be > 0")
        if self.m_f <= 0:
            raise ValueError("m_f must be > 0")
        if self.q_g < 0:
            raise ValueError("q_g must be >= 0")
        if self.l_g < self.mu:
            raise ValueError("l_g must be >= mu")

    def to_dict(self):
        return asdict(self)


class BilevelProblem(ABC):
    """Base class for bilevel problems.

    Subclasses set ``n``, ``p`` and ``constants`` and implement the oracles.
    Oracles must be deterministic. Set ``single_use = True`` if an instance
    must not be shared between concurrent runs; callers then work on
    :meth:`clone` copies.
    """

    n: int
    p: int
    constants: ProblemConstants
    single_use: bool = False

    @abstractmethod
    def f_value(self, x, y) -> float:
        ...

    @abstractmethod
    def df_element(self, x, y):
        """Return one fixed element ``(d_x, d_y)`` of the field of ``f``."""

    @abstractmethod
    def g_value(self, x, y) -> float:
        ...

    @abstractmethod
    def grad_y_g(self, x, y) -> np.ndarray:
        ...

    @abstractmethod
    def hess_yy(self, x, y) -> LinearOperator:
        """Symmetric ``p -> p`` operator with spectrum in ``[mu, l_g]``."""

    @abstractmethod
    def hess_xy(self, x, y) -> LinearOperator:
        """Mixed block ``p -> n``."""

    def hess_yx(self, x, y) -> LinearOperator:
        """Transpose of :meth:`hess_xy`, ``n -> p``."""
        op = self.hess_xy(x, y)
        if op.matrix is None:
            raise NotImplementedError(
                "hess_yx must be implemented for matrix-free hess_xy")
        return LinearOperator.from_matrix(op.matrix.T)

    def third_xyy(self, x, y, d) -> LinearOperator:
        """Derivative of ``hess_xy`` along the ``y``-direction ``d`` (``p -> n``)."""
        raise NotImplementedError("third-order oracles not provided")

    def third_yyy(self, x, y, d) -> LinearOperator:
        """Derivative of ``hess_yy`` along the ``y``-direction ``d`` (``p -> p``)."""
        raise NotImplementedError("third-order oracles not provided")

    @property
    def has_third_order(self) -> bool:
        cls = type(self)
        return (cls.third_xyy is not BilevelProblem.third_xyy
                and cls.third_yyy is not BilevelProblem.third_yyy)

    def clone(self):
        return copy.deepcopy(self)


@dataclass
class ValidationReport:
    passed: bool
    usable: bool
    failed_oracle: Optional[str] = None
    checks: list = field(default_factory=list)
    rayleigh_range: tuple = (np.nan, np.nan)

    def check(self, name):
        for c in self.checks:
            if c["name"] == name:
                return c
        raise KeyError(name)

    def failed_checks(self):
        return [c["name"] for c in self.checks if not c["passed"]]

    def to_dict(self):
        return {
            "passed": self.passed,
            "usable": self.usable,
            "failed_oracle": self.failed_oracle,
            "rayleigh_range": [float(v) for v in self.rayleigh_range],
            "checks": self.checks,
        }


GRAD_FD_TOL = 1e-5
HESS_FD_TOL = 1e-4
SAMPLE_SCALE = 10.0


def _call(name, fn, *args):
    try:
        out = fn(*args)
    except NotImplementedError:
        raise
    except Exception as exc:  # oracle failures are reported, not raised
        raise OracleError(name, exc) from exc
    if isinstance(out, LinearOperator):
        return out
    if isinstance(out, tuple):
        arrs = tuple(np.asarray(o, dtype=np.float64) for o in out)
        if not all(np.all(np.isfinite(a)) for a in arrs):
            raise OracleError(name, "non-finite output")
        return arrs
    arr = np.asarray(out, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise OracleError(name, "non-finite output")
    return arr


def _rel(err, ref):
    return float(err) / max(float(ref), 1e-6)


def validate_problem(prob: BilevelProblem, samples: int = 10,
                     seed=0) -> ValidationReport:
    """Numerically certify a problem's oracles against its declared constants.

    Points are drawn uniformly from the cube ``[-10, 10]^(n+p)``. Checked:
    spectrum of ``hess_yy`` within ``[mu - tol, l_g + tol]`` (``tol =
    1e-8 * l_g``), operator symmetry, transpose consistency and linearity,
    finite-difference consistency of ``grad_y_g`` with ``g_value`` and of the
    Hessian blocks with ``grad_y_g``, the ``m_f`` bound and determinism of
    ``df_element``, and third-order consistency when those oracles exist.
    """
    samples = check_count(samples, "samples")
    rng = check_random_state(seed)
    n, p = prob.n, prob.p
    c = prob.constants
    spec_tol = 1e-8 * c.l_g
    scale = max(1.0, c.l_g)

    worst = {
        "spectral": 0.0, "symmetry": 0.0, "transpose": 0.0, "linearity": 0.0,
        "grad_fd": 0.0, "hess_yy_fd": 0.0, "hess_yx_fd": 0.0,
        "df_bound": 0.0, "df_determinism": 0.0, "third_order_fd": 0.0,
    }
    rq_min, rq_max = np.inf, -np.inf
    third = prob.has_third_order

    try:
        for _ in range(samples):
            x = rng.uniform(-1, 1, n) * SAMPLE_SCALE
            y = rng.uniform(-1, 1, p) * SAMPLE_SCALE
            H = _call("hess_yy", prob.hess_yy, x, y)
            Bxy = _call("hess_xy", prob.hess_xy, x, y)
            Byx = _call("hess_yx", prob.hess_yx, x, y)

            # spectral probes
            for _ in range(4):
                v = rng.standard_normal(p)
                rq = float(v @ _call("hess_yy", H.apply, v)) / float(v @ v)
                rq_min, rq_max = min(rq_min, rq), max(rq_max, rq)
            viol = max(c.mu - rq_min, rq_max - c.l_g, 0.0)
            worst["spectral"] = max(worst["spectral"], viol / scale)

            u, v = rng.standard_normal(p), rng.standard_normal(p)
            asym = abs(u @ H.apply(v) - v @ H.apply(u))
            worst["symmetry"] = max(worst["symmetry"], asym / (
                np.linalg.norm(u) * np.linalg.norm(v) * scale))

            ux = rng.standard_normal(n)
            tdiff = abs(ux @ Bxy.apply(v) - v @ Byx.apply(ux))
            worst["transpose"] = max(worst["transpose"], tdiff / (
                np.linalg.norm(ux) * np.linalg.norm(v) * scale))

            a, b = rng.standard_normal(2)
            for op, dim in ((H, p), (Bxy, p), (Byx, n)):
                s, t = rng.standard_normal(dim), rng.standard_normal(dim)
                lin = np.linalg.norm(op.apply(a * s + b * t) - a * op.apply(s)
                                     - b * op.apply(t))
                ref = scale * (abs(a) * np.linalg.norm(s)
                               + abs(b) * np.linalg.norm(t))
                worst["linearity"] = max(worst["linearity"], lin / ref)

            # finite differences
            zinf = max(np.max(np.abs(x)), np.max(np.abs(y)))
            h = 1e-5 * (1.0 + zinf)
            G = _call("grad_y_g", prob.grad_y_g, x, y)
            if p <= 64:
                fd = np.empty(p)
                for j in range(p):
                    e = np.zeros(p)
                    e[j] = h
                    fd[j] = (_call("g_value", prob.g_value, x, y + e)
                             - _call("g_value", prob.g_value, x, y - e)) / (2 * h)
                worst["grad_fd"] = max(worst["grad_fd"], _rel(
                    np.linalg.norm(fd - G), np.linalg.norm(fd)))
            else:
                for _ in range(8):
                    e = rng.standard_normal(p)
                    e /= np.linalg.norm(e)
                    fd = (_call("g_value", prob.g_value, x, y + h * e)
                          - _call("g_value", prob.g_value, x, y - h * e)) / (2 * h)
                    worst["grad_fd"] = max(worst["grad_fd"], _rel(
                        abs(fd - G @ e), max(abs(fd), np.linalg.norm(G))))

            e = rng.standard_normal(p)
            e /= np.linalg.norm(e)
            fd = (_call("grad_y_g", prob.grad_y_g, x, y + h * e)
                  - _call("grad_y_g", prob.grad_y_g, x, y - h * e)) / (2 * h)
            worst["hess_yy_fd"] = max(worst["hess_yy_fd"], _rel(
                np.linalg.norm(fd - H.apply(e)), np.linalg.norm(fd)))
            ex = rng.standard_normal(n)
            ex /= np.linalg.norm(ex)
            fd = (_call("grad_y_g", prob.grad_y_g, x + h * ex, y)
                  - _call("grad_y_g", prob.grad_y_g, x - h * ex, y)) / (2 * h)
            ref = Byx.apply(ex)
            # hess_yx may legitimately vanish; compare absolutely then
            worst["hess_yx_fd"] = max(worst["hess_yx_fd"], float(
                np.linalg.norm(fd - ref)) / max(np.linalg.norm(fd), 1.0))

            dx, dy = _call("df_element", prob.df_element, x, y)
            dnorm = float(np.hypot(np.linalg.norm(dx), np.linalg.norm(dy)))
            worst["df_bound"] = max(worst["df_bound"], dnorm - c.m_f)
            dx2, dy2 = _call("df_element", prob.df_element, x, y)
            worst["df_determinism"] = max(worst["df_determinism"], float(
                np.max(np.abs(np.concatenate([dx - dx2, dy - dy2])))))

            if third:
                d = rng.standard_normal(p)
                d /= np.linalg.norm(d)
                probe_y = rng.standard_normal(p)
                for t in (1e-3, 1e-4):
                    Txy = _call("third_xyy", prob.third_xyy, x, y, d)
                    Tyy = _call("third_yyy", prob.third_yyy, x, y, d)
                    Bp, Bm = prob.hess_xy(x, y + t * d), prob.hess_xy(x, y - t * d)
                    Hp, Hm = prob.hess_yy(x, y + t * d), prob.hess_yy(x, y - t * d)
                    exy = np.linalg.norm(
                        (Bp.apply(probe_y) - Bm.apply(probe_y)) / (2 * t)
                        - Txy.apply(probe_y))
                    eyy = np.linalg.norm(
                        (Hp.apply(probe_y) - Hm.apply(probe_y)) / (2 * t)
                        - Tyy.apply(probe_y))
                    err = max(exy, eyy) / np.linalg.norm(probe_y)
                    bound = 10.0 * c.q_g * t + 1e-9 * scale
                    worst["third_order_fd"] = max(worst["third_order_fd"],
                                                  err / bound)
    except OracleError as exc:
        return ValidationReport(
            passed=False, usable=False, failed_oracle=exc.oracle,
            checks=[{"name": "oracle", "passed": False, "worst": None,
                     "detail": str(exc)}])

    limits = {
        "spectral": spec_tol / scale,
        "symmetry": 1e-10,
        "transpose": 1e-10,
        "linearity": 1e-12,
        "grad_fd": GRAD_FD_TOL,
        "hess_yy_fd": HESS_FD_TOL,
        "hess_yx_fd": HESS_FD_TOL,
        "df_bound": 1e-12,
        "df_determinism": 0.0,
        "third_order_fd": 1.0,
    }
    checks = []
    for name, limit in limits.items():
        if name == "third_order_fd" and not third:
            continue
        checks.append({"name": name, "passed": bool(worst[name] <= limit),
                       "worst": float(worst[name]), "limit": float(limit)})
    checks[0]["rayleigh_range"] = [float(rq_min), float(rq_max)]
    passed = all(ch["passed"] for ch in checks)
    return ValidationReport(passed=passed, usable=True, checks=checks,
                            rayleigh_range=(rq_min, rq_max))
