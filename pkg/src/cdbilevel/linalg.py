"""Matrix-free linear operators and a conjugate-gradient solver.

Every inverse-Hessian application in the library goes through
:func:`cg_solve`, which enforces an absolute residual contract
``||op(x) - rhs|| <= eps`` on a residual recomputed from scratch.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = ["LinearOperator", "CgReport", "cg_solve"]


class LinearOperator:
    """A linear map ``R^dim_in -> R^dim_out`` given by its action.

    Parameters
    ----------
    dim_in, dim_out : int
        Input and output dimensions.
    apply : callable
        Maps a float array of shape ``(dim_in,)`` to one of shape
        ``(dim_out,)``.
    matrix : ndarray, optional
        Dense representation, if the operator was built from one. Only used
        to speed up :meth:`to_dense`.
    """

    def __init__(self, dim_in: int, dim_out: int, apply: Callable,
                 matrix: Optional[np.ndarray] = None):
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self._apply = apply
        self.matrix = matrix

    @classmethod
    def from_matrix(cls, matrix) -> "LinearOperator":
        m = np.asarray(matrix, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("matrix must be two-dimensional")
        return cls(m.shape[1], m.shape[0], m.__matmul__, matrix=m)

    @classmethod
    def zeros(cls, dim_in: int, dim_out: int) -> "LinearOperator":
        return cls.from_matrix(np.zeros((dim_out, dim_in)))

    def apply(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.dim_in,):
            raise ValueError(
                f"operator expects shape ({self.dim_in},), got {v.shape}")
        return np.asarray(self._apply(v), dtype=np.float64)

    __call__ = apply

    def __matmul__(self, v):
        return self.apply(v)

    @property
    def shape(self):
        return (self.dim_out, self.dim_in)

    def to_dense(self) -> np.ndarray:
        """Materialize the operator column by column."""
        if self.matrix is not None:
            return np.array(self.matrix, dtype=np.float64)
        eye = np.eye(self.dim_in)
        return np.column_stack([self.apply(eye[:, j])
                                for j in range(self.dim_in)]).reshape(
                                    self.dim_out, self.dim_in)

    def __repr__(self):
        return (f"{type(self).__name__}(dim_in={self.dim_in}, "
                f"dim_out={self.dim_out})")


@dataclass(frozen=True)
class CgReport:
    iterations: int
    residual_norm: float
    converged: bool


# eps == 0 stagnation rule: fewer than 1% residual decrease over this window.
_STAGNATION_WINDOW = 5
_STAGNATION_FACTOR = 1.0 - 1e-2


def cg_solve(op: LinearOperator, rhs, eps: float = 0.0,
             cap: Optional[int] = None):
    """Solve ``op(x) = rhs`` for a symmetric positive definite ``op``.

    Parameters
    ----------
    op : LinearOperator
        SPD operator, ``p -> p``.
    rhs : array_like of shape (p,)
    eps : float
        Absolute tolerance on ``||op(x) - rhs||``. ``eps == 0`` means solve
        to stagnation: stop once the true residual reaches machine-precision
        scale or, after at least ``p`` iterations, the best residual
        decreases by less than 1% over 5 iterations.
    cap : int, optional
        Maximum number of iterations, default ``10 * p``.

    Returns
    -------
    x : ndarray of shape (p,)
        Best iterate found (smallest true residual).
    report : CgReport
        ``residual_norm`` is always ``||op(x) - rhs||`` recomputed for the
        returned ``x``.
    """
    b = np.asarray(rhs, dtype=np.float64)
    p = b.shape[0]
    if op.dim_in != p or op.dim_out != p:
        raise ValueError("cg_solve needs a square operator matching rhs")
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    if cap is None:
        cap = 10 * max(p, 1)
    if cap < 1:
        raise ValueError("cap must be at least 1")

    bnorm = float(np.linalg.norm(b))
    x = np.zeros(p)
    if bnorm == 0.0:
        return x, CgReport(0, 0.0, True)
    if bnorm <= eps:
        return x, CgReport(0, bnorm, True)

    floor = 8.0 * np.finfo(np.float64).eps * bnorm
    r = b.copy()
    d = r.copy()
    rr = float(r @ r)
    best_x, best_res = x.copy(), bnorm
    history = [bnorm]
    broke = False

    for it in range(1, cap + 1):
        q = op.apply(d)
        dq = float(d @ q)
        if not dq > 0.0:
            # breakdown: op is not SPD along d, or d vanished
            broke = True
            break
        alpha = rr / dq
        x = x + alpha * d
        r = r - alpha * q
        rr_new = float(r @ r)

        if eps > 0.0 and np.sqrt(rr_new) > eps:
            # recurrence says not yet
            true_res = None
        else:
            r_true = b - op.apply(x)
            true_res = float(np.linalg.norm(r_true))
            if true_res < best_res:
                best_x, best_res = x.copy(), true_res
            if eps > 0.0 and true_res <= eps:
                return x, CgReport(it, true_res, True)
            if eps == 0.0:
                history.append(best_res)
                if true_res <= floor:
                    return best_x, CgReport(it, best_res, True)
                # CG residuals may plateau before finite termination, so
                # stagnation only counts once p steps have been taken
                if (it >= p and len(history) > _STAGNATION_WINDOW
                        and history[-1] > _STAGNATION_FACTOR
                        * history[-1 - _STAGNATION_WINDOW]):
                    return best_x, CgReport(it, best_res, True)
            # residual replacement keeps the recurrence honest
            r = r_true
            rr_new = float(r @ r)

        beta = rr_new / rr
        d = r + beta * d
        rr = rr_new

    res = float(np.linalg.norm(b - op.apply(x)))
    if res < best_res:
        best_x, best_res = x, res
    if eps > 0.0:
        converged = best_res <= eps
    else:
        converged = broke or best_res <= floor
    return best_x, CgReport(it, best_res, converged)
