"""Monolithic CSHM + network-edge model on a region of interest.

Minimise ``F(g) = CSHM(g) - phi * sum_a G_a(c * g_a)`` over the ROI pixels of
``g`` (everything else fixed to a prior CSHM solution), where ``c = omega/f_max``
and ``G_a(f) = max(s*y, T - s*y)`` with ``y`` the network output on window ``a``.

Bounds come from a Lagrangian split of the window pixels: a convex ROI
problem solved by the primal-dual engine (its dual value is a certified lower
bound) plus one exact mixed-integer problem per window.  The multipliers are
updated by Polyak supergradient steps; incumbents are exact evaluations of
``F`` at candidate images.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import scipy.sparse as sp

from .convex import (ConvexResult, CshmConfig, _unpack, cshm_objective, pixel_upper_bounds,
                     primal_dual, restricted_tv)
from .core import Image
from .edgenet import EdgeNet
from .mipro import PAPER_U_BAR, window_origins
from .relumip import build_subregion_mip, compute_neuron_bounds, relative_gap, solve_mip

log = logging.getLogger(__name__)


class IntegratedError(ValueError):
    pass


@dataclass(frozen=True)
class IntegratedConfig:
    phi: float = 1e8
    roi: tuple = (24, 24, 16, 16)  # row, col, height, width
    mode: str = "non-overlapping"
    gap_tol: float = 0.15
    time_limit: float = 600.0
    max_windows: int = 25
    T: float = 800.0
    edge_reference: float = PAPER_U_BAR
    lagrange_iters: int = 20
    convex_iters: int = 4000
    convex_tol: float = 1e-7

    def __post_init__(self):
        if self.phi < 0:
            raise IntegratedError("phi must be nonnegative")
        if self.mode not in ("overlapping", "non-overlapping"):
            raise IntegratedError("mode must be 'overlapping' or 'non-overlapping'")
        if len(self.roi) != 4 or min(self.roi[2:]) < 3 or min(self.roi[:2]) < 0:
            raise IntegratedError("roi must be (row, col, height, width) with size >= 3")


@dataclass
class Checkpoint:
    iteration: int
    seconds: float
    incumbent: float
    bound: float
    gap: float


@dataclass
class IntegratedResult:
    image: Image
    objective: float
    bound: float
    gap: float
    status: str
    baseline_objective: float
    nodes: int
    windows: List[tuple]
    trace: List[Checkpoint] = field(default_factory=list)
    roi: tuple = ()

    def write_trace(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["iteration", "seconds", "incumbent", "bound", "gap", "roi"])
            for c in self.trace:
                wr.writerow([c.iteration, f"{c.seconds:.3f}", repr(c.incumbent), repr(c.bound),
                             f"{c.gap:.6e}", "x".join(map(str, self.roi))])


def roi_windows(roi, mode) -> List[tuple]:
    r0, c0, h, w = roi
    if mode == "overlapping":
        rows, cols = window_origins(h, 1), window_origins(w, 1)
    else:
        rows, cols = list(range(0, h - 2, 3)), list(range(0, w - 2, 3))
    return [(r0 + r, c0 + c) for r in rows for c in cols]


def edge_value(net, f, T, sigma) -> float:
    y = sigma * float(net.forward(f))
    return max(y, T - y)


def integrated_objective(R, p, img, cshm_cfg, net, windows, phi, T, sigma, scale) -> float:
    """Exact ``F`` at a full image ``img`` (2-D array)."""
    val = cshm_objective(R, p, img.ravel(), cshm_cfg.lambda_tv, cshm_cfg.mu, cshm_cfg.omega)
    if phi == 0:
        return val
    edge = sum(edge_value(net, scale * img[r:r + 3, c:c + 3].ravel(), T, sigma)
               for r, c in windows)
    return val - phi * edge


def solve_integrated(R, p, cshm_cfg: CshmConfig, net: EdgeNet, cfg: IntegratedConfig,
                     prior: Optional[ConvexResult], trace_path=None) -> IntegratedResult:
    if prior is None:
        raise IntegratedError("a prior CSHM solution is required (it supplies f_max)")
    t0 = time.perf_counter()
    A, b = _unpack(R, p)
    g0 = prior.image.as_array().copy()
    H, W = g0.shape
    r0, c0, h, w = cfg.roi
    if r0 + h > H or c0 + w > W:
        raise IntegratedError(f"roi {cfg.roi} exceeds the {H}x{W} image")
    windows = roi_windows(cfg.roi, cfg.mode)
    if len(windows) > cfg.max_windows:
        raise IntegratedError(f"roi needs {len(windows)} windows, cap is {cfg.max_windows}")
    if net.u_bar is None or not net.u_bar > 0:
        raise IntegratedError("net has no positive u_bar")
    f_max = float(g0.max())
    if not f_max > 0:
        raise IntegratedError("prior solution is all zero")
    omega = net.omega
    scale = omega / f_max
    sigma = cfg.edge_reference / net.u_bar
    phi, T = cfg.phi, cfg.T

    def F(img):
        return integrated_objective(A, b, img, cshm_cfg, net, windows, phi, T, sigma, scale)

    # --- convex ROI block -------------------------------------------------
    roi_mask = np.zeros((H, W), bool)
    roi_mask[r0:r0 + h, c0:c0 + w] = True
    free = np.flatnonzero(roi_mask.ravel())
    fixed = np.flatnonzero(~roi_mask.ravel())
    win_mask = np.zeros((H, W), bool)
    for r, c in windows:
        win_mask[r:r + 3, c:c + 3] = True
    in_win = win_mask.ravel()[free]
    A = sp.csc_matrix(A)
    A_free = A[:, free].tocsr()
    g_flat = g0.ravel()
    b_free = b - A[:, fixed] @ g_flat[fixed]
    tv_op, tv_const = restricted_tv((H, W), free, g_flat)
    const = cshm_cfg.lambda_tv * tv_const + cshm_cfg.mu * float(
        np.sum(np.maximum(0.0, g_flat[fixed] - cshm_cfg.omega) ** 2))
    ub_ray = pixel_upper_bounds(A, b)[free]
    upper = np.where(in_win, np.minimum(ub_ray, f_max), ub_ray)
    upper = np.where(np.isfinite(upper), upper, f_max)

    # --- window blocks ----------------------------------------------------
    full_upper = np.full(H * W, f_max)
    full_upper[free] = upper
    win_models = []
    for r, c in windows:
        idx = (np.arange(r, r + 3)[:, None] * W + np.arange(c, c + 3)).ravel()
        box_hi = np.minimum(scale * full_upper[idx], omega)
        bounds = compute_neuron_bounds(net, (np.zeros(9), box_hi))
        model = build_subregion_mip(net, T, 0.0, 0.0, omega, None, edge_scale=sigma,
                                    u_bar=net.u_bar, bounds=bounds)
        pos = np.searchsorted(free, idx)
        win_models.append((idx, pos, model))

    nu = np.zeros(free.size)
    best_img, best_val = g0.copy(), F(g0)
    baseline = best_val
    best_bound = -math.inf
    trace: List[Checkpoint] = []
    nodes = 0
    x_warm, y_warm = g_flat[free].copy(), None
    status = "time_limit"
    it = 0
    for it in range(cfg.lagrange_iters):
        lin = -nu
        x, obj, dual, _, _, _, y_warm = primal_dual(
            A_free, b_free, lam=cshm_cfg.lambda_tv, mu=cshm_cfg.mu, omega=cshm_cfg.omega,
            upper=upper, lin=lin, tv=tv_op, max_iters=cfg.convex_iters, tol=cfg.convex_tol,
            x0=x_warm, y0=y_warm)
        x_warm = x
        lower = dual + const
        u = np.zeros(free.size)
        cand = g0.copy()
        for idx, pos, model in win_models:
            m = model
            if phi > 0:
                m_c = m.c.copy()
                m_c[m.groups["inputs"]] -= nu[pos] / (scale * phi)
                sub = _with_objective(m, m_c)
                sol = solve_mip(sub, gap_tol=1e-9, time_limit=max(1.0, cfg.time_limit))
                nodes += sol.nodes
                lower -= phi * sol.bound
                f_win = sol.x[m.groups["inputs"]] / scale
            else:
                # without the edge term each window block is linear in its pixels
                lower -= float(np.sum(np.maximum(0.0, -nu[pos]) * upper[pos]))
                f_win = np.where(nu[pos] < 0, upper[pos], 0.0)
            u[pos] = f_win
            cand.ravel()[idx] = f_win
        best_bound = max(best_bound, lower)
        # candidate images: convex point, window argmaxes, and their blend
        conv_img = g0.copy()
        conv_img.ravel()[free] = x
        mixed = conv_img.copy()
        mixed.ravel()[free[in_win]] = u[in_win]
        for img in (conv_img, cand, mixed):
            v = F(img)
            if v < best_val:
                best_val, best_img = v, img.copy()
        gap = relative_gap(best_bound, best_val) if best_bound <= best_val else 0.0
        trace.append(Checkpoint(it, time.perf_counter() - t0, best_val, best_bound, gap))
        log.info("integrated iter %d incumbent %.6e bound %.6e gap %.3e", it, best_val,
                 best_bound, gap)
        if gap <= cfg.gap_tol:
            status = "optimal" if gap <= 1e-6 else "gap_reached"
            break
        if time.perf_counter() - t0 > cfg.time_limit:
            status = "time_limit"
            break
        sub_grad = np.where(in_win, u - x, 0.0)
        norm2 = float(sub_grad @ sub_grad)
        if norm2 == 0:
            status = "gap_reached" if gap <= cfg.gap_tol else "node_limit"
            break
        nu = nu + (best_val - lower) / norm2 * sub_grad
    else:
        status = "node_limit"
    if trace_path is not None:
        res = IntegratedResult(Image.from_array(best_img), best_val, best_bound,
                               trace[-1].gap, status, baseline, nodes, windows, trace, cfg.roi)
        res.write_trace(trace_path)
    return IntegratedResult(Image.from_array(best_img), best_val, best_bound, trace[-1].gap,
                            status, baseline, nodes, windows, trace, cfg.roi)


def _with_objective(model, c):
    from dataclasses import replace

    return replace(model, c=c)
