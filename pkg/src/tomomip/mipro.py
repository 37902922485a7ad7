"""Sliding-window mixed-integer re-optimisation of a reconstruction."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np

from .core import Image
from .edgenet import EdgeNet
from .relumip import build_subregion_mip, compute_neuron_bounds, solve_mip, window_objective

log = logging.getLogger(__name__)

PAPER_U_BAR = 550.0


@dataclass(frozen=True)
class MipRoConfig:
    """``T`` is on the reference edge scale where the largest network output
    maps to ``PAPER_U_BAR``; it is converted to the net's own scale at run time."""

    spacing: int = 1
    T: float = 800.0
    alpha: float = 1.0 / 50.0
    beta: float = 1.0 / 50.0
    omega: float = 255.0
    gap_tol: float = 1e-6
    time_limit: float = math.inf
    node_limit: float = math.inf
    merge: str = "mean"
    edge_reference: float = PAPER_U_BAR

    def __post_init__(self):
        if self.spacing not in (1, 3):
            raise ValueError("spacing must be 1 or 3")
        if self.T < 0 or self.alpha < 0 or self.beta < 0:
            raise ValueError("T, alpha and beta must be nonnegative")
        if self.merge not in ("mean", "max"):
            raise ValueError("merge must be 'mean' or 'max'")
        if self.omega <= 0 or self.edge_reference <= 0:
            raise ValueError("omega and edge_reference must be positive")


class WindowSolveError(RuntimeError):
    pass


def rescale_reference(f_star: Image, omega: float = 255.0) -> Image:
    """``omega * f / max(f)``."""
    arr = f_star.as_array()
    fmax = arr.max() if arr.size else 0.0
    if not fmax > 0:
        raise ValueError("reference image must have a positive maximum")
    out = np.clip(arr * (omega / fmax), 0.0, omega)
    return Image.from_array(out)


def window_origins(side: int, spacing: int) -> List[int]:
    """Top-left offsets along one axis; a final clamped window covers any remainder."""
    if side < 3:
        raise ValueError("image must be at least 3x3")
    pos = list(range(0, side - 2, spacing))
    if pos[-1] != side - 3:
        pos.append(side - 3)
    return pos


@dataclass
class PixelVotes:
    shape: tuple
    entries: Dict[int, tuple] = field(default_factory=dict)

    def add(self, index: int, row: int, col: int, values):
        self.entries[index] = (row, col, np.asarray(values, dtype=np.float64).reshape(3, 3))

    def counts(self) -> np.ndarray:
        cnt = np.zeros(self.shape, dtype=np.int64)
        for r, c, _ in self.entries.values():
            cnt[r:r + 3, c:c + 3] += 1
        return cnt

    def values_at(self, r, c) -> List[float]:
        out = []
        for k in sorted(self.entries):
            r0, c0, v = self.entries[k]
            if r0 <= r < r0 + 3 and c0 <= c < c0 + 3:
                out.append(float(v[r - r0, c - c0]))
        return out


def merge_pixel_votes(votes: PixelVotes, mode: str = "mean") -> Image:
    """Per-pixel mean (or max) of the votes, accumulated in window-index order."""
    acc = np.zeros(votes.shape)
    if mode == "max":
        acc[:] = -np.inf
    cnt = np.zeros(votes.shape, dtype=np.int64)
    for k in sorted(votes.entries):
        r, c, v = votes.entries[k]
        if mode == "max":
            np.maximum(acc[r:r + 3, c:c + 3], v, out=acc[r:r + 3, c:c + 3])
        else:
            acc[r:r + 3, c:c + 3] += v
        cnt[r:r + 3, c:c + 3] += 1
    if np.any(cnt == 0):
        raise ValueError("some pixels received no votes")
    return Image.from_array(acc if mode == "max" else acc / cnt)


@dataclass
class WindowResult:
    index: int
    row: int
    col: int
    values: np.ndarray
    objective: float
    reference_objective: float
    edge: int
    status: str
    nodes: int
    gap: float
    certified: bool
    seconds: float


@dataclass
class MipRoResult:
    image: Image
    windows: List[WindowResult]
    edge_scale: float
    T_net: float

    @property
    def limited(self) -> int:
        return sum(w.status not in ("optimal", "gap_reached") for w in self.windows)

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["window", "row", "col", "status", "nodes", "gap", "objective",
                         "reference_objective", "edge", "certified", "seconds"])
            for w in self.windows:
                wr.writerow([w.index, w.row, w.col, w.status, w.nodes, f"{w.gap:.3e}",
                             repr(w.objective), repr(w.reference_objective), w.edge,
                             int(w.certified), f"{w.seconds:.4f}"])


# per-process state for the worker pool
_STATE: dict = {}


def _init_worker(net_dict, cfg, edge_scale, bounds):
    _STATE["net"] = EdgeNet.from_dict(net_dict)
    _STATE["cfg"] = cfg
    _STATE["edge_scale"] = edge_scale
    _STATE["bounds"] = bounds


def _solve_window(task) -> WindowResult:
    index, row, col, ref = task
    net, cfg = _STATE["net"], _STATE["cfg"]
    sigma, bounds = _STATE["edge_scale"], _STATE["bounds"]
    t0 = time.perf_counter()
    model = build_subregion_mip(net, cfg.T, cfg.alpha, cfg.beta, cfg.omega, ref,
                                edge_scale=sigma, u_bar=net.u_bar, bounds=bounds)
    start = model.completion(np.concatenate([ref, np.zeros(model.n - ref.size)]), model.lb,
                             model.ub)
    sol = solve_mip(model, gap_tol=cfg.gap_tol, time_limit=cfg.time_limit,
                    node_limit=cfg.node_limit, initial=[start] if start is not None else None)
    if sol.x is None:
        raise WindowSolveError(f"window at ({row}, {col}) has no feasible solution: {sol.status}")
    vals = np.clip(sol.x[model.groups["inputs"]], 0.0, cfg.omega)
    ref_obj = window_objective(net, ref, cfg.T, cfg.alpha, cfg.beta, cfg.omega, ref, sigma)
    return WindowResult(index, row, col, vals, sol.objective, ref_obj,
                        int(round(sol.x[model.groups["e"][0]])), sol.status, sol.nodes, sol.gap,
                        sol.certified, time.perf_counter() - t0)


def edge_scale_for(net: EdgeNet, cfg: MipRoConfig) -> float:
    if net.u_bar is None or not net.u_bar > 0:
        raise ValueError("net has no positive u_bar; run max_output first")
    return cfg.edge_reference / net.u_bar


def sliding_window_reoptimize(f_star: Image, net: EdgeNet, cfg: MipRoConfig = MipRoConfig(),
                              workers: int = 1, log_path=None) -> MipRoResult:
    """Re-optimise every 3x3 window of the rescaled ``f_star`` and merge the votes.

    Window results are keyed by position, so the output does not depend on
    ``workers`` or on completion order.
    """
    if f_star.width < 3 or f_star.height < 3:
        raise ValueError("image must be at least 3x3")
    if abs(net.omega - cfg.omega) > 1e-12 * cfg.omega:
        raise ValueError(f"net trained for omega={net.omega}, config uses {cfg.omega}")
    sigma = edge_scale_for(net, cfg)
    if not cfg.T < 2 * cfg.edge_reference:
        raise ValueError(f"T must lie in [0, {2 * cfg.edge_reference}) on the reference scale")
    T_net = cfg.T / sigma
    log.info("edge scale %.6g: T=%g maps to %.6g on the net's output scale", sigma, cfg.T, T_net)
    ref = rescale_reference(f_star, cfg.omega).as_array()
    bounds = compute_neuron_bounds(net, (np.zeros(9), np.full(9, cfg.omega)))
    tasks = []
    for r in window_origins(ref.shape[0], cfg.spacing):
        for c in window_origins(ref.shape[1], cfg.spacing):
            tasks.append((len(tasks), r, c, ref[r:r + 3, c:c + 3].ravel().copy()))
    init = (net.to_dict(), cfg, sigma, bounds)
    if workers <= 1:
        _init_worker(*init)
        results = [_solve_window(t) for t in tasks]
    else:
        chunk = max(1, len(tasks) // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=init) as pool:
            results = list(pool.map(_solve_window, tasks, chunksize=chunk))
    votes = PixelVotes(ref.shape)
    for w in results:
        votes.add(w.index, w.row, w.col, w.values)
        if w.status not in ("optimal", "gap_reached"):
            log.warning("window (%d, %d) stopped with status %s, gap %.3g; using incumbent",
                        w.row, w.col, w.status, w.gap)
    out = merge_pixel_votes(votes, cfg.merge)
    res = MipRoResult(out, results, sigma, T_net)
    if log_path is not None:
        res.write_log(log_path)
    return res


def default_workers() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1
