"""Best-first branch-and-bound over the binaries of a :class:`MipModel`."""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..datasets import rng_for
from .lp import INFEASIBLE, ITERATION_LIMIT, OPTIMAL, solve_lp
from .model import MipModel, MipSolution, relative_gap

log = logging.getLogger(__name__)

INT_TOL = 1e-9
FEAS_TOL = 1e-7
OPTIMAL_TOL = 1e-6


class SolverError(RuntimeError):
    pass


class BoundViolation(AssertionError):
    pass


@dataclass
class _Relax:
    status: str
    value: float
    x: Optional[np.ndarray]


class _Envelope:
    """LP over ``x`` plus one epigraph variable per quadratic term.

    Convex terms (``q > 0``) are bounded above by their secant on ``[l, u]``;
    concave terms by tangent cuts, refined Kelley-style at the LP optimum.
    """

    def __init__(self, model: MipModel, terms_idx, terms_coef):
        self.m = model
        self.idx = np.asarray(terms_idx, dtype=np.int64)
        self.coef = np.asarray(terms_coef, dtype=np.float64)
        self.K = self.idx.size
        self.lp_solves = 0

    def _lp(self, c, lb, ub, cuts):
        m = self.m
        n, K = m.n, self.K
        if K == 0:
            self.lp_solves += 1
            return solve_lp(c, m.A_eq, m.b_eq, m.A_ub, m.b_ub, lb, ub)
        A_eq = np.hstack([m.A_eq, np.zeros((m.A_eq.shape[0], K))])
        rows, rhs = [], []
        for k, j, slope, icpt in cuts:
            r = np.zeros(n + K)
            r[n + k] = 1.0
            r[j] -= slope
            rows.append(r)
            rhs.append(icpt)
        A_ub = np.vstack([np.hstack([m.A_ub, np.zeros((m.A_ub.shape[0], K))])] + [np.array(rows)])
        b_ub = np.concatenate([m.b_ub, rhs])
        l, u = lb[self.idx], ub[self.idx]
        sq_min = np.where((l <= 0) & (u >= 0), 0.0, np.minimum(l * l, u * u))
        sq_max = np.maximum(l * l, u * u)
        t_lo = np.where(self.coef > 0, self.coef * sq_min, self.coef * sq_max)
        t_hi = np.where(self.coef > 0, self.coef * sq_max, self.coef * sq_min)
        cc = np.concatenate([c, np.ones(K)])
        self.lp_solves += 1
        res = solve_lp(cc, A_eq, m.b_eq, A_ub, b_ub, np.concatenate([lb, t_lo]),
                       np.concatenate([ub, t_hi]))
        return res

    def initial_cuts(self, lb, ub):
        cuts = []
        for k, (j, q) in enumerate(zip(self.idx, self.coef)):
            l, u = lb[j], ub[j]
            if q > 0:
                cuts.append((k, j, q * (l + u), -q * l * u))
            else:
                for a in (l, 0.5 * (l + u), u):
                    cuts.append((k, j, 2 * q * a, -q * a * a))
        return cuts

    def solve(self, lb, ub, c=None, rounds=1, tol=1e-9):
        """Upper bound of the model objective over the node box."""
        c = self.m.c if c is None else c
        cuts = self.initial_cuts(lb, ub)
        res = None
        for _ in range(rounds + 1):
            res = self._lp(c, lb, ub, cuts)
            if res.status != OPTIMAL or self.K == 0:
                break
            x = res.x[:self.m.n]
            t = res.x[self.m.n:]
            true = self.coef * x[self.idx] ** 2
            over = t - true
            scale = tol * max(1.0, abs(res.value))
            new = [(k, self.idx[k], 2 * self.coef[k] * x[self.idx[k]],
                    -self.coef[k] * x[self.idx[k]] ** 2)
                   for k in np.flatnonzero((over > scale) & (self.coef < 0))]
            if not new:
                break
            cuts.extend(new)
        if res.status == ITERATION_LIMIT:
            raise SolverError("LP iteration limit in node relaxation")
        if res.status != OPTIMAL:
            return _Relax(INFEASIBLE, -math.inf, None)
        return _Relax(OPTIMAL, res.value + self.m.const, res.x[:self.m.n].copy())


def _aggregated_terms(model):
    q = model.quad_diag()
    nz = np.flatnonzero(q != 0)
    return nz, q[nz]


def _leaf_concave(model, lb, ub):
    """Exact leaf for ``sum Q_j x_j^2`` with all ``Q_j <= 0``: Kelley cuts to convergence."""
    idx, coef = _aggregated_terms(model)
    env = _Envelope(model, idx, coef)
    r = env.solve(lb, ub, rounds=400, tol=1e-11)
    return r, env.lp_solves


def _leaf_local(model, lb, ub, x0, seed):
    """Local search for leaves with convex terms: repeatedly maximise the
    linearisation at the current point (concave parts kept exact via tangent
    cuts).  Each step cannot decrease the objective."""
    idx, coef = _aggregated_terms(model)
    pos = coef > 0
    cvx_idx, cvx_q = idx[pos], coef[pos]
    env = _Envelope(model, idx[~pos], coef[~pos])
    rng = rng_for(seed)
    starts = [] if x0 is None else [np.clip(x0, lb, ub)]
    for trial in range(4):
        direction = model.c.copy()
        if trial:
            direction = direction + rng.normal(0, 1, model.n) * (np.abs(model.c).max() + 1.0)
        r = env.solve(lb, ub, c=direction, rounds=50)
        if r.status == OPTIMAL:
            starts.append(r.x)
    best_x, best_v = None, -math.inf
    for x in starts:
        val = model.objective(x) if model.violation(x) <= FEAS_TOL else -math.inf
        for _ in range(100):
            c = model.c.copy()
            np.add.at(c, cvx_idx, 2 * cvx_q * x[cvx_idx])
            # the linearisation misses the constant -q a^2; it cancels in comparisons
            r = env.solve(lb, ub, c=c, rounds=50)
            if r.status != OPTIMAL:
                break
            nv = model.objective(r.x)
            if nv <= val + 1e-12 * max(1.0, abs(val)):
                if nv > val:
                    x, val = r.x, nv
                break
            x, val = r.x, nv
        if val > best_v:
            best_x, best_v = x, val
    return best_x, best_v, env.lp_solves


def solve_mip(model: MipModel, gap_tol: float = 1e-6, time_limit: float = math.inf,
              node_limit: float = math.inf, debug: bool = False, seed: int = 0,
              initial=None) -> MipSolution:
    """Maximise ``model`` to a relative gap of ``gap_tol``.

    Node bounds come from the LP relaxation, with quadratic terms replaced by
    their envelope over the node box.  Leaves with all binaries fixed are
    solved exactly when the aggregated quadratic part is concave (or absent);
    leaves with convex parts get a multi-start local search.  Any model with a
    convex part (``alpha > beta`` in the window objective) is reported as not
    certified, even when pruning happens to close the gap.
    """
    t0 = time.perf_counter()
    env = _Envelope(model, model.quad_idx, model.quad_coef)
    linear = model.is_linear
    qdiag = model.quad_diag()
    concave = bool(np.all(qdiag <= 0))
    bins = np.flatnonzero(model.binary)
    counter = itertools.count()
    inc_x, inc_v = None, -math.inf
    certified = concave
    nodes = 0
    lp_extra = 0

    def offer(x, v, where):
        nonlocal inc_x, inc_v
        if x is None or not math.isfinite(v):
            return
        if model.violation(x) > FEAS_TOL * max(1.0, np.abs(x).max(initial=0.0)):
            return
        if v > inc_v:
            inc_x, inc_v = x.copy(), v

    def abs_tol():
        return 1e-9 * max(1.0, abs(inc_v)) if math.isfinite(inc_v) else 0.0

    def relax(lb, ub):
        nonlocal nodes
        nodes += 1
        return env.solve(lb, ub)

    def heuristic(r, lb, ub):
        if model.completion is None or r.x is None:
            return
        xc = model.completion(r.x, lb, ub)
        if xc is not None:
            v = model.objective(xc)
            if debug and model.violation(xc) <= FEAS_TOL and v > r.value + 1e-7 * max(1, abs(v)):
                raise BoundViolation(f"node bound {r.value} below feasible value {v}")
            offer(xc, v, "completion")

    def leaf(lb, ub, x0, key):
        nonlocal certified, lp_extra
        lb = lb.copy()
        ub = ub.copy()
        vals = np.rint(x0[bins])
        lb[bins] = ub[bins] = vals
        if concave:
            r, k = _leaf_concave(model, lb, ub)
            lp_extra += k
            if r.status == OPTIMAL:
                offer(r.x, model.objective(r.x), "leaf")
            return r.value if r.status == OPTIMAL else -math.inf
        x, v, k = _leaf_local(model, lb, ub, x0, seed + key)
        lp_extra += k
        certified = False
        offer(x, v, "leaf")
        return v

    for x0 in initial or ():
        offer(np.asarray(x0, dtype=np.float64), model.objective(x0), "initial")
    lb0, ub0 = model.lb.copy(), model.ub.copy()
    root = relax(lb0, ub0)
    heap = []
    if root.status == OPTIMAL:
        heuristic(root, lb0, ub0)
        heap.append((-root.value, next(counter), lb0, ub0, root))
    status = "optimal"
    while heap:
        top = -heap[0][0]
        bound = max(inc_v, top)
        gap = relative_gap(bound, inc_v)
        if inc_x is not None and gap <= gap_tol:
            status = "optimal" if gap <= OPTIMAL_TOL else "gap_reached"
            break
        if time.perf_counter() - t0 > time_limit:
            status = "time_limit"
            break
        if nodes >= node_limit:
            status = "node_limit"
            break
        negb, key, lb, ub, r = heapq.heappop(heap)
        if -negb <= inc_v + abs_tol():
            heap.clear()
            break
        xb = r.x[bins]
        free = lb[bins] < ub[bins]
        frac = np.abs(xb - np.rint(xb))
        cand = np.flatnonzero(free & (frac > INT_TOL))
        if cand.size == 0:
            if linear:
                offer(r.x, model.objective(r.x), "lp")
                continue
            leaf_v = leaf(lb, ub, r.x, key)
            if debug and leaf_v > r.value + 1e-7 * max(1.0, abs(leaf_v)):
                raise BoundViolation(f"leaf value {leaf_v} exceeds node bound {r.value}")
            unfixed = np.flatnonzero(free)
            if unfixed.size == 0:
                continue
            j = bins[unfixed[0]]
        else:
            dist = np.abs(xb[cand] - 0.5)
            j = bins[cand[np.argmin(dist)]]
        for v in (0.0, 1.0):
            clb, cub = lb.copy(), ub.copy()
            clb[j] = cub[j] = v
            cr = relax(clb, cub)
            if cr.status != OPTIMAL:
                continue
            heuristic(cr, clb, cub)
            if cr.value > inc_v + abs_tol():
                heapq.heappush(heap, (-cr.value, next(counter), clb, cub, cr))
    bound = max(inc_v, -heap[0][0]) if heap else inc_v
    if inc_x is None:
        if status == "optimal":
            status = "infeasible"
        bound = -heap[0][0] if heap else -math.inf
        gap = math.inf
    else:
        gap = relative_gap(bound, inc_v)
    return MipSolution(inc_x, inc_v, bound, gap, nodes, status, certified,
                       time.perf_counter() - t0, env.lp_solves + lp_extra)
