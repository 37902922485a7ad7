"""SIRT, TV-regularised least squares (CS) and its homogeneous-material variant (CSHM).

CS and CSHM share one Chambolle-Pock primal-dual engine.  The engine handles

    min_x  ||R x - p||^2 + lam * ||D x + c||_1 + mu * sum max(0, x - omega)^2 + lin . x
    s.t.   0 <= x <= upper

and evaluates the dual function at every check, so the reported gap is a
certified bound on suboptimality.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import kernels
from .core import DimensionError, Image, Sinogram

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CsConfig:
    lambda_tv: float = 0.0
    max_iters: int = 20000
    tol: float = 1e-6
    check_every: int = 25

    def __post_init__(self):
        if self.lambda_tv < 0:
            raise ValueError("lambda_tv must be nonnegative")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass(frozen=True)
class CshmConfig(CsConfig):
    mu: float = 0.0
    omega: float = 255.0

    def __post_init__(self):
        super().__post_init__()
        if self.mu < 0:
            raise ValueError("mu must be nonnegative")
        if not self.omega > 0:
            raise ValueError("omega must be positive")


@dataclass
class ConvexResult:
    image: Image
    objective: float
    dual_bound: float
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    slack: Optional[np.ndarray] = None

    @property
    def gap(self) -> float:
        return (self.objective - self.dual_bound) / max(1.0, abs(self.objective))


def _as_matrix(R):
    return R.matrix if hasattr(R, "matrix") else sp.csr_matrix(R)


def _as_values(p):
    return p.values if isinstance(p, Sinogram) else np.asarray(p, dtype=np.float64).reshape(-1)


def _side(n, shape=None):
    if shape is not None:
        return shape
    s = int(round(math.sqrt(n)))
    if s * s != n:
        raise DimensionError("pass image_shape for non-square images")
    return (s, s)


# ---------------------------------------------------------------------------
# SIRT
# ---------------------------------------------------------------------------

def sirt(R, p, iters: int = 1000, image_shape=None, x0=None, trace=None) -> Image:
    """SIRT with a non-negativity projection after each sweep.

    ``f <- max(0, f + C R^T W (p - R f))`` with ``C``/``W`` the inverse
    column/row sums (zero where the sum vanishes).  When ``trace`` is a list,
    the W-weighted residual norm after each sweep is appended to it.
    """
    if iters < 1:
        raise ValueError("iters must be at least 1")
    A = _as_matrix(R)
    b = _as_values(p)
    if A.shape[0] != b.size:
        raise DimensionError(f"operator has {A.shape[0]} rows, sinogram {b.size}")
    rs = np.asarray(A.sum(axis=1)).ravel()
    cs = np.asarray(A.sum(axis=0)).ravel()
    W = np.divide(1.0, rs, out=np.zeros_like(rs), where=rs > 0)
    C = np.divide(1.0, cs, out=np.zeros_like(cs), where=cs > 0)
    AT = A.T.tocsr()
    f = np.zeros(A.shape[1]) if x0 is None else np.array(x0, dtype=np.float64)
    for _ in range(iters):
        r = b - A @ f
        f += C * (AT @ (W * r))
        np.maximum(f, 0.0, out=f)
        if trace is not None:
            rr = b - A @ f
            trace.append(float(np.sqrt(np.sum(W * rr * rr))))
    h, w = _side(A.shape[1], image_shape)
    return Image(w, h, f)


# ---------------------------------------------------------------------------
# TV
# ---------------------------------------------------------------------------

def tv_norm(f) -> float:
    """Anisotropic TV with forward differences (zero across the border)."""
    arr = f.as_array() if isinstance(f, Image) else np.asarray(f, dtype=np.float64)
    gx, gy = kernels.grad(arr)
    return float(np.abs(gx).sum() + np.abs(gy).sum())


def difference_matrix(shape) -> sp.csr_matrix:
    """Sparse forward-difference operator matching ``kernels.grad`` (stacked gx, gy)."""
    h, w = shape
    n = h * w
    idx = np.arange(n).reshape(h, w)
    rows, cols, vals = [], [], []
    # gx rows are indexed like pixels (i, j) with i < h-1
    a = idx[:-1, :].ravel()
    b = idx[1:, :].ravel()
    rows += [a, a]
    cols += [b, a]
    vals += [np.ones(a.size), -np.ones(a.size)]
    a2 = idx[:, :-1].ravel()
    b2 = idx[:, 1:].ravel()
    rows += [n + a2, n + a2]
    cols += [b2, a2]
    vals += [np.ones(a2.size), -np.ones(a2.size)]
    D = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(2 * n, n))
    return D


class _GridTV:
    """Difference operator on a full free image, via the grid kernels."""

    def __init__(self, shape):
        self.shape = shape
        self.offset = None

    def apply(self, x):
        gx, gy = kernels.grad(x.reshape(self.shape))
        return np.concatenate((gx.ravel(), gy.ravel()))

    def adjoint(self, y):
        n = y.size // 2
        return kernels.grad_adj(y[:n].reshape(self.shape), y[n:].reshape(self.shape)).ravel()

    def abs_row_sums(self):
        h, w = self.shape
        n = h * w
        out = np.zeros(2 * n)
        out[:n].reshape(h, w)[:-1, :] = 2.0
        out[n:].reshape(h, w)[:, :-1] = 2.0
        return out

    def abs_col_sums(self):
        return np.asarray(abs(difference_matrix(self.shape)).sum(axis=0)).ravel()


class _SparseTV:
    """Difference operator restricted to free pixels, with a fixed offset."""

    def __init__(self, D, offset):
        self.D = D.tocsr()
        self.DT = self.D.T.tocsr()
        self.offset = offset

    def apply(self, x):
        return self.D @ x

    def adjoint(self, y):
        return self.DT @ y

    def abs_row_sums(self):
        return np.asarray(abs(self.D).sum(axis=1)).ravel()

    def abs_col_sums(self):
        return np.asarray(abs(self.D).sum(axis=0)).ravel()


def restricted_tv(shape, free_idx, fixed_values):
    """TV operator over ``free_idx`` pixels; the other pixels take ``fixed_values``
    (a full-length vector).  Returns ``(op, constant)`` where ``constant`` is the
    TV contribution of differences between two fixed pixels."""
    D = difference_matrix(shape)
    free = np.zeros(D.shape[1], bool)
    free[free_idx] = True
    Df = D[:, np.flatnonzero(free)]
    fixed = np.where(free, 0.0, fixed_values)
    c = D @ fixed
    touches = np.asarray(abs(Df).sum(axis=1)).ravel() > 0
    const = float(np.abs(c[~touches]).sum())
    return _SparseTV(Df[touches], c[touches]), const


# ---------------------------------------------------------------------------
# Primal-dual engine
# ---------------------------------------------------------------------------

def _prox_g(v, tau, mu, omega, upper, lin):
    if lin is not None:
        v = v - tau * lin
    x = v
    if mu > 0:
        over = v > omega
        x = np.where(over, (v + 2.0 * tau * mu * omega) / (1.0 + 2.0 * tau * mu), v)
    return np.clip(x, 0.0, upper)


def _g_conj(v, mu, omega, upper, lin):
    """sum_j sup_{0<=x<=U_j} (v_j - lin_j) x - mu max(0, x - omega)^2."""
    a = v if lin is None else v - lin
    pos = a > 0
    if not np.any(pos):
        return 0.0
    a = a[pos]
    U = upper[pos]
    if mu > 0:
        x = np.where(U <= omega, U, np.minimum(U, omega + a / (2.0 * mu)))
        out_pos = a * x - mu * np.maximum(0.0, x - omega) ** 2
    else:
        if np.any(~np.isfinite(U)):
            return np.inf
        out_pos = a * U
    return float(out_pos.sum())


def _primal_objective(A, b, tv, lam, mu, omega, lin, x):
    r = A @ x - b
    val = float(r @ r)
    if lam > 0:
        t = tv.apply(x)
        if tv.offset is not None:
            t = t + tv.offset
        val += lam * float(np.abs(t).sum())
    if mu > 0:
        val += mu * float(np.sum(np.maximum(0.0, x - omega) ** 2))
    if lin is not None:
        val += float(lin @ x)
    return val


def _dual_value(A, b, tv, lam, mu, omega, upper, lin, y1, y2):
    val = -(float(y1 @ y1) / 4.0 + float(y1 @ b))
    grad = A.T @ y1
    if lam > 0:
        if tv.offset is not None:
            val += float(y2 @ tv.offset)
        grad = grad + tv.adjoint(y2)
    return val - _g_conj(-grad, mu, omega, upper, lin)


def implied_upper_bounds(A, b, lam=0.0, tv_const=0.0):
    """Per-pixel bound satisfied by every minimiser of the CS objective.

    At the optimum the objective is at most its value at ``x = 0``, so each
    residual is at most ``rho = sqrt(||p||^2 + lam*tv_const)`` and
    ``R_ij x_j <= p_i + rho``.
    """
    rho = math.sqrt(float(b @ b) + lam * tv_const)
    return pixel_upper_bounds(A, b + rho)


def primal_dual(A, b, *, lam, mu=0.0, omega=np.inf, upper, lin=None, tv=None,
                max_iters=20000, tol=1e-6, check_every=25, x0=None, y0=None,
                bound_upper=None, trace_path=None, verbose=False, primal_weight=1.0,
                restart_every=100):
    """Chambolle-Pock with diagonal preconditioning and adaptive restarts.

    Every ``restart_every`` iterations the extrapolated point is reset to the
    current iterate and the primal weight (the balance between primal and dual
    step sizes) is moved halfway, in log scale, towards the ratio of dual to
    primal movement since the previous restart.  ``restart_every=0`` gives the
    plain fixed-weight method.

    ``upper`` is the feasible box; ``bound_upper`` (defaults to ``upper``) is a
    box known to contain a minimiser, used only for the dual bound.
    Returns ``(x, objective, dual_bound, iterations, converged, trace, duals)``.
    """
    A = sp.csr_matrix(A)
    AT = A.T.tocsr()
    n = A.shape[1]
    if bound_upper is None:
        bound_upper = upper
    use_tv = lam > 0 and tv is not None
    absA = abs(A)
    col_sum = np.asarray(absA.sum(axis=0)).ravel()
    row_r = np.asarray(absA.sum(axis=1)).ravel()
    if use_tv:
        col_sum = col_sum + tv.abs_col_sums()
        row_d = tv.abs_row_sums()
    tau0 = np.divide(1.0, col_sum, out=np.full(n, 1.0), where=col_sum > 0)
    sig1_0 = np.divide(1.0, row_r, out=np.full(row_r.size, 1.0), where=row_r > 0)
    sig2_0 = (np.divide(1.0, row_d, out=np.full(row_d.size, 1.0), where=row_d > 0)
              if use_tv else None)
    weight = float(primal_weight)

    x = np.zeros(n) if x0 is None else np.clip(np.asarray(x0, dtype=np.float64), 0, upper)
    y1 = np.zeros(A.shape[0])
    y2 = np.zeros(row_d.size) if use_tv else None
    if y0 is not None:
        y1 = y0[0].copy()
        if use_tv and y0[1] is not None:
            y2 = y0[1].copy()
    xbar = x.copy()
    anchor = (x.copy(), y1.copy(), None if y2 is None else y2.copy())
    best_x, best_obj = x.copy(), np.inf
    best_dual = -np.inf
    trace = []
    converged = False
    it = 0
    writer = None
    fh = None
    if trace_path is not None:
        fh = open(trace_path, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "residual"])
    try:
        tau, sig1 = tau0 / weight, sig1_0 * weight
        sig2 = sig2_0 * weight if use_tv else None
        for it in range(1, max_iters + 1):
            v = y1 + sig1 * (A @ xbar)
            y1 = (v - sig1 * b) / (1.0 + sig1 / 2.0)
            kty = AT @ y1
            if use_tv:
                t = tv.apply(xbar)
                if tv.offset is not None:
                    t = t + tv.offset
                y2 = np.clip(y2 + sig2 * t, -lam, lam)
                kty = kty + tv.adjoint(y2)
            x_new = _prox_g(x - tau * kty, tau, mu, omega, upper, lin)
            xbar = 2.0 * x_new - x
            x = x_new
            if restart_every and it % restart_every == 0:
                dx = float(np.sqrt(np.sum((x - anchor[0]) ** 2 / tau0)))
                dy2 = float(np.sum((y1 - anchor[1]) ** 2 / sig1_0))
                if use_tv:
                    dy2 += float(np.sum((y2 - anchor[2]) ** 2 / sig2_0))
                dy = math.sqrt(dy2)
                if dx > 0 and dy > 0:
                    weight = math.exp(0.5 * math.log(dy / dx) + 0.5 * math.log(weight))
                    tau, sig1 = tau0 / weight, sig1_0 * weight
                    if use_tv:
                        sig2 = sig2_0 * weight
                anchor = (x.copy(), y1.copy(), None if y2 is None else y2.copy())
                xbar = x.copy()
            if it % check_every == 0 or it == max_iters:
                obj = _primal_objective(A, b, tv, lam if use_tv else 0.0, mu, omega, lin, x)
                dual = _dual_value(A, b, tv, lam if use_tv else 0.0, mu, omega, bound_upper,
                                   lin, y1, y2)
                if obj < best_obj:
                    best_obj, best_x = obj, x.copy()
                best_dual = max(best_dual, dual)
                res = float(np.linalg.norm(A @ x - b))
                trace.append((it, obj, res))
                if writer is not None:
                    writer.writerow([it, obj, res])
                if verbose:
                    log.info("iter %d obj %.6e dual %.6e weight %.3g", it, obj, dual, weight)
                if (best_obj - best_dual) <= tol * max(1.0, abs(best_obj)):
                    converged = True
                    break
    finally:
        if fh is not None:
            fh.close()
    return best_x, best_obj, best_dual, it, converged, trace, (y1, y2)


def _unpack(R, p):
    A = _as_matrix(R)
    b = _as_values(p)
    if A.shape[0] != b.size:
        raise DimensionError(f"operator has {A.shape[0]} rows, sinogram {b.size}")
    return A, b


def solve_cs(R, p, cfg: CsConfig, image_shape=None, trace_path=None, x0=None) -> ConvexResult:
    """``min ||R f - p||^2 + lambda ||f||_TV`` over ``f >= 0``."""
    A, b = _unpack(R, p)
    shape = _side(A.shape[1], image_shape)
    upper = np.full(A.shape[1], np.inf)
    bound_upper = implied_upper_bounds(A, b)
    x, obj, dual, it, ok, trace, _ = primal_dual(
        A, b, lam=cfg.lambda_tv, upper=upper, bound_upper=bound_upper, tv=_GridTV(shape),
        max_iters=cfg.max_iters, tol=cfg.tol, check_every=cfg.check_every, x0=x0,
        trace_path=trace_path)
    if not ok:
        log.warning("CS stopped after %d iterations without reaching tol %.1e", it, cfg.tol)
    return ConvexResult(Image(shape[1], shape[0], x), obj, dual, it, ok, trace)


def pixel_upper_bounds(R, p) -> np.ndarray:
    """``b_j = min_{i: R_ij > 0} p_i / R_ij``; ``inf`` for pixels no ray touches."""
    A = _as_matrix(R).tocsc()
    b = _as_values(p)
    ratios = b[A.indices] / A.data
    out = np.full(A.shape[1], np.inf)
    counts = np.diff(A.indptr)
    nz = counts > 0
    if ratios.size:
        mins = np.minimum.reduceat(ratios, A.indptr[:-1][nz])
        out[nz] = mins
    return out


def solve_cshm(R, p, cfg: CshmConfig, image_shape=None, trace_path=None, x0=None,
               upper=None) -> ConvexResult:
    """CS plus the density penalty ``mu ||d||^2`` (``d >= f - omega``, ``d >= 0``)
    and per-pixel ray bounds.  The slack is returned at its optimal value
    ``max(0, f - omega)``."""
    A, b = _unpack(R, p)
    shape = _side(A.shape[1], image_shape)
    ub = pixel_upper_bounds(A, b) if upper is None else np.asarray(upper, dtype=np.float64)
    bound_upper = np.minimum(ub, implied_upper_bounds(A, b))
    x, obj, dual, it, ok, trace, _ = primal_dual(
        A, b, lam=cfg.lambda_tv, mu=cfg.mu, omega=cfg.omega, upper=ub,
        bound_upper=bound_upper, tv=_GridTV(shape), max_iters=cfg.max_iters, tol=cfg.tol,
        check_every=cfg.check_every, x0=x0, trace_path=trace_path)
    if not ok:
        log.warning("CSHM stopped after %d iterations without reaching tol %.1e", it, cfg.tol)
    slack = np.maximum(0.0, x - cfg.omega)
    return ConvexResult(Image(shape[1], shape[0], x), obj, dual, it, ok, trace, slack)


def cshm_objective(R, p, f, lam, mu, omega) -> float:
    A, b = _unpack(R, p)
    x = f.pixels if isinstance(f, Image) else np.asarray(f, dtype=np.float64).ravel()
    r = A @ x - b
    arr = x.reshape(_side(x.size, f.shape if isinstance(f, Image) else None))
    return float(r @ r + lam * tv_norm(arr) + mu * np.sum(np.maximum(0.0, x - omega) ** 2))


def scale_lambda(paper_lambda: float, side: int, paper_side: int = 512) -> float:
    """Scale a regularisation weight quoted at ``paper_side`` to ``side``."""
    return paper_lambda * side / paper_side
