"""Boxed linear programs on top of the bounded-variable simplex kernel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
ITERATION_LIMIT = "iteration_limit"

_FEAS_TOL = 1e-9


@dataclass
class LPResult:
    status: str
    x: np.ndarray
    value: float
    iterations: int = 0


def solve_lp(c, A_eq, b_eq, A_ub, b_ub, lb, ub, maximize=True, max_iter=None) -> LPResult:
    """Optimise ``c @ x`` over ``A_eq x = b_eq``, ``A_ub x <= b_ub``, ``lb <= x <= ub``.

    Fixed variables are substituted out, empty rows are checked and dropped, and
    inequalities receive boxed slacks, so the kernel always sees a standard
    equality form with finite bounds.
    """
    c = np.asarray(c, dtype=np.float64)
    lb = np.asarray(lb, dtype=np.float64)
    ub = np.asarray(ub, dtype=np.float64)
    n = c.size
    A_eq = np.asarray(A_eq, dtype=np.float64).reshape(-1, n)
    A_ub = np.asarray(A_ub, dtype=np.float64).reshape(-1, n)
    b_eq = np.asarray(b_eq, dtype=np.float64).reshape(-1)
    b_ub = np.asarray(b_ub, dtype=np.float64).reshape(-1)
    if np.any(lb > ub + _FEAS_TOL):
        return LPResult(INFEASIBLE, lb.copy(), -np.inf if maximize else np.inf)
    if not (np.all(np.isfinite(lb)) and np.all(np.isfinite(ub))):
        raise ValueError("every variable needs finite bounds")

    free = ub - lb > 0
    fixed_x = np.where(free, 0.0, lb)
    F = np.flatnonzero(free)
    Ae = A_eq[:, F]
    be = b_eq - A_eq @ fixed_x
    Au = A_ub[:, F]
    bu = b_ub - A_ub @ fixed_x
    lo, hi = lb[F], ub[F]
    scale = max(1.0, np.max(np.abs(be), initial=0.0), np.max(np.abs(bu), initial=0.0))
    tol = _FEAS_TOL * scale

    # rows without free variables are either satisfied or prove infeasibility
    keep_e = np.any(Ae != 0, axis=1)
    if np.any(np.abs(be[~keep_e]) > tol):
        return LPResult(INFEASIBLE, fixed_x, -np.inf if maximize else np.inf)
    keep_u = np.any(Au != 0, axis=1)
    if np.any(bu[~keep_u] < -tol):
        return LPResult(INFEASIBLE, fixed_x, -np.inf if maximize else np.inf)
    Ae, be, Au, bu = Ae[keep_e], be[keep_e], Au[keep_u], bu[keep_u]

    row_min = np.minimum(Au * lo, Au * hi).sum(axis=1)
    slack_hi = bu - row_min
    if np.any(slack_hi < -tol):
        return LPResult(INFEASIBLE, fixed_x, -np.inf if maximize else np.inf)
    slack_hi = np.maximum(slack_hi, 0.0)

    cf = c[F] if not maximize else -c[F]
    nf, me, mu = F.size, be.size, bu.size
    x = fixed_x.copy()
    if me + mu == 0:
        x[F] = np.where(cf < 0, hi, lo)
        return LPResult(OPTIMAL, x, float(c @ x))

    A = np.zeros((me + mu, nf + mu))
    A[:me, :nf] = Ae
    A[me:, :nf] = Au
    A[me:, nf:] = np.eye(mu)
    b = np.concatenate([be, bu])
    cost = np.concatenate([cf, np.zeros(mu)])
    lo_all = np.concatenate([lo, np.zeros(mu)])
    hi_all = np.concatenate([hi, slack_hi])
    if max_iter is None:
        max_iter = 50 * (A.shape[0] + A.shape[1]) + 1000
    status, sol, iters = kernels.bounded_simplex(np.ascontiguousarray(A), b, cost, lo_all,
                                                 hi_all, int(max_iter))
    x[F] = sol[:nf]
    if status == kernels.LP_INFEASIBLE:
        return LPResult(INFEASIBLE, x, -np.inf if maximize else np.inf, iters)
    if status != kernels.LP_OPTIMAL:
        return LPResult(ITERATION_LIMIT, x, float(c @ x), iters)
    return LPResult(OPTIMAL, x, float(c @ x), iters)


def solve_model_lp(model, lb=None, ub=None, c=None) -> LPResult:
    """LP relaxation of a :class:`MipModel` (quadratic terms ignored)."""
    return solve_lp(model.c if c is None else c, model.A_eq, model.b_eq, model.A_ub, model.b_ub,
                    model.lb if lb is None else lb, model.ub if ub is None else ub)
