"""Mixed-integer encodings of ReLU networks and of the per-window edge objective."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from ..edgenet import EdgeNet
from .lp import OPTIMAL, solve_lp
from .model import MipModel, ModelBuilder


@dataclass
class NeuronBounds:
    """Pre-activation interval ``[lo[k][i], hi[k][i]]`` of neuron ``i`` in layer ``k``."""

    input_lo: np.ndarray
    input_hi: np.ndarray
    lo: List[np.ndarray]
    hi: List[np.ndarray]

    def __post_init__(self):
        for lo, hi in zip(self.lo, self.hi):
            if np.any(lo > hi):
                raise ValueError("neuron bound with lo > hi")

    def post(self, k):
        return np.maximum(self.lo[k], 0.0), np.maximum(self.hi[k], 0.0)


def _box(net, input_box):
    if input_box is None:
        lo, hi = np.zeros(net.layer_sizes[0]), np.full(net.layer_sizes[0], float(net.omega))
    else:
        lo, hi = (np.broadcast_to(np.asarray(v, dtype=np.float64), (net.layer_sizes[0],)).copy()
                  for v in input_box)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))) or np.any(lo > hi):
        raise ValueError("input box must be finite with lo <= hi")
    return lo, hi


def compute_neuron_bounds(net: EdgeNet, input_box=None) -> NeuronBounds:
    """Interval propagation; ``input_box`` defaults to ``[0, omega]`` per input."""
    in_lo, in_hi = _box(net, input_box)
    lo_prev, hi_prev = in_lo, in_hi
    los, his = [], []
    for W, b in zip(net.weights, net.biases):
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        lo = Wp @ lo_prev + Wn @ hi_prev + b
        hi = Wp @ hi_prev + Wn @ lo_prev + b
        los.append(lo)
        his.append(hi)
        lo_prev, hi_prev = np.maximum(lo, 0.0), np.maximum(hi, 0.0)
    return NeuronBounds(in_lo, in_hi, los, his)


@dataclass
class NetworkVars:
    inputs: np.ndarray
    x: List[np.ndarray]
    s: List[np.ndarray]
    z: List[np.ndarray]

    @property
    def output(self) -> int:
        return int(self.x[-1][0])

    @property
    def all_z(self) -> np.ndarray:
        return np.concatenate(self.z)


def encode_into(builder: ModelBuilder, net: EdgeNet, bounds: NeuronBounds,
                inputs: Optional[np.ndarray] = None, prefix: str = "") -> NetworkVars:
    """Add the (x, s, z) triple of every neuron to ``builder``.

    Each neuron gets ``W x_prev + b = x - s`` with big-M links
    ``x <= hi+ z`` and ``s <= (-lo)+ (1 - z)``.  Dead neurons (``hi <= 0``) have
    ``x`` and ``z`` fixed to 0; always-active ones (``lo >= 0``) have ``s`` fixed
    to 0 and ``z`` to 1.
    """
    if inputs is None:
        inputs = np.array([builder.var(f"{prefix}f{j}", bounds.input_lo[j], bounds.input_hi[j])
                           for j in range(net.layer_sizes[0])])
    prev = np.asarray(inputs)
    xs, ss, zs = [], [], []
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        lo, hi = bounds.lo[k], bounds.hi[k]
        xk, sk, zk = [], [], []
        for i in range(W.shape[0]):
            tag = f"{prefix}{k + 1}_{i}"
            up, down = max(hi[i], 0.0), max(-lo[i], 0.0)
            if hi[i] <= 0:
                xi = builder.var("x" + tag, 0.0, 0.0)
                si = builder.var("s" + tag, 0.0, down)
                zi = builder.var("z" + tag, 0.0, 0.0, binary=True)
            elif lo[i] >= 0:
                xi = builder.var("x" + tag, 0.0, up)
                si = builder.var("s" + tag, 0.0, 0.0)
                zi = builder.var("z" + tag, 1.0, 1.0, binary=True)
            else:
                xi = builder.var("x" + tag, 0.0, up)
                si = builder.var("s" + tag, 0.0, down)
                zi = builder.var("z" + tag, 0.0, 1.0, binary=True)
                builder.add_le({xi: 1.0, zi: -up}, 0.0)
                builder.add_le({si: 1.0, zi: down}, down)
            row = {int(p): float(w) for p, w in zip(prev, W[i]) if w != 0}
            row[xi] = row.get(xi, 0.0) - 1.0
            row[si] = row.get(si, 0.0) + 1.0
            builder.add_eq(row, -float(b[i]))
            xk.append(xi)
            sk.append(si)
            zk.append(zi)
        xs.append(np.array(xk))
        ss.append(np.array(sk))
        zs.append(np.array(zk))
        prev = xs[-1]
    return NetworkVars(np.asarray(inputs), xs, ss, zs)


def forward_assignment(net: EdgeNet, nv: NetworkVars, f, x_out: np.ndarray) -> np.ndarray:
    """Write the forward-pass values of input ``f`` (x, s and z) into ``x_out``."""
    a = np.asarray(f, dtype=np.float64)
    x_out[nv.inputs] = a
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        pre = W @ a + b
        a = np.maximum(pre, 0.0)
        x_out[nv.x[k]] = a
        x_out[nv.s[k]] = np.maximum(-pre, 0.0)
        x_out[nv.z[k]] = (pre > 0).astype(np.float64)
    return x_out


def _pattern_fix(nv: NetworkVars, x: np.ndarray, lb, ub) -> bool:
    """Adjust z on neurons with zero pre-activation to match node fixings.
    Returns False when the forward pattern contradicts a fixing."""
    for zk, xk, sk in zip(nv.z, nv.x, nv.s):
        for zi, xi, si in zip(zk, xk, sk):
            if lb[zi] == ub[zi] and x[zi] != lb[zi]:
                if x[xi] == 0.0 and x[si] == 0.0:
                    x[zi] = lb[zi]
                else:
                    return False
    return True


def encode_network(net: EdgeNet, bounds: Optional[NeuronBounds] = None) -> MipModel:
    """Model whose feasible (input, output) pairs are exactly the graph of the
    network on the bounds' input box.  Objective: maximise the output."""
    bounds = bounds or compute_neuron_bounds(net)
    bld = ModelBuilder()
    nv = encode_into(bld, net, bounds)
    if net.layer_sizes[-1] == 1:
        bld.add_obj(nv.output, 1.0)

    def completion(xr, lb, ub):
        f = np.clip(xr[nv.inputs], lb[nv.inputs], ub[nv.inputs])
        x = forward_assignment(net, nv, f, np.zeros(lb.size))
        return x if _pattern_fix(nv, x, lb, ub) else None

    model = bld.build(groups=_groups(nv), completion=completion)
    return model


def _groups(nv: NetworkVars, **extra):
    g = {"inputs": nv.inputs, "z": nv.all_z, "x": np.concatenate(nv.x),
         "s": np.concatenate(nv.s), "output": np.array([nv.output])}
    g.update({k: np.atleast_1d(np.asarray(v)) for k, v in extra.items()})
    return g


def network_vars(model: MipModel, net: EdgeNet) -> NetworkVars:
    """Recover the per-layer index arrays from a model built by this module."""
    sizes = net.layer_sizes[1:]
    xs, ss, zs = [], [], []
    xa, sa, za = model.groups["x"], model.groups["s"], model.groups["z"]
    o = 0
    for n in sizes:
        xs.append(xa[o:o + n])
        ss.append(sa[o:o + n])
        zs.append(za[o:o + n])
        o += n
    return NetworkVars(model.groups["inputs"], xs, ss, zs)


def tighten_bounds(net: EdgeNet, bounds: Optional[NeuronBounds] = None) -> NeuronBounds:
    """Optimisation-based tightening: every pre-activation of layer ``k >= 2``
    is minimised and maximised over the LP relaxation of the layers before it.
    The result is still valid for the same input box and never looser."""
    bounds = bounds or compute_neuron_bounds(net)
    lo = [l.copy() for l in bounds.lo]
    hi = [h.copy() for h in bounds.hi]
    for k in range(1, len(net.weights)):
        partial = EdgeNet(net.weights[:k], net.biases[:k], net.omega)
        pb = NeuronBounds(bounds.input_lo, bounds.input_hi, lo[:k], hi[:k])
        bld = ModelBuilder()
        nv = encode_into(bld, partial, pb)
        m = bld.build()
        W, b = net.weights[k], net.biases[k]
        for i in range(W.shape[0]):
            c = np.zeros(m.n)
            c[nv.x[-1]] = W[i]
            top = solve_lp(c, m.A_eq, m.b_eq, m.A_ub, m.b_ub, m.lb, m.ub, maximize=True)
            bot = solve_lp(c, m.A_eq, m.b_eq, m.A_ub, m.b_ub, m.lb, m.ub, maximize=False)
            if top.status == OPTIMAL:
                hi[k][i] = min(hi[k][i], top.value + b[i] + 1e-9 * (1 + abs(top.value)))
            if bot.status == OPTIMAL:
                lo[k][i] = max(lo[k][i], bot.value + b[i] - 1e-9 * (1 + abs(bot.value)))
            if lo[k][i] > hi[k][i]:
                lo[k][i] = hi[k][i] = 0.5 * (lo[k][i] + hi[k][i])
    return NeuronBounds(bounds.input_lo, bounds.input_hi, lo, hi)


# ---------------------------------------------------------------------------
# Per-window edge objective
# ---------------------------------------------------------------------------

def build_subregion_mip(net: EdgeNet, T: float, alpha: float, beta: float, omega: float,
                        f_star=None, *, edge_scale: float = 1.0, u_bar: Optional[float] = None,
                        combine_terms: bool = True,
                        bounds: Optional[NeuronBounds] = None) -> MipModel:
    """Window model: maximise ``e*Y + (1-e)*(T - Y) - alpha*Dev - beta*L`` with
    ``Y = edge_scale * y``, ``Dev = sum (omega - f) f`` and ``L = sum (f - f*)^2``.

    ``e*y`` is replaced by ``w`` with the exact product constraints for binary
    ``e`` and ``0 <= y <= u``.  With ``combine_terms`` the per-pixel ``f^2``
    coefficients of Dev and L are merged into ``alpha - beta``; for
    ``alpha == beta`` they cancel and the pixel part is affine,
    ``-alpha*(omega - 2 f*) f - alpha f*^2``.  Without it, Dev and L stay as
    separate quadratic terms.
    """
    if T < 0 or alpha < 0 or beta < 0 or omega <= 0 or edge_scale <= 0:
        raise ValueError("need T, alpha, beta >= 0 and omega, edge_scale > 0")
    n_in = net.layer_sizes[0]
    if beta > 0 and f_star is None:
        raise ValueError("beta > 0 requires a reference subregion f_star")
    fs = np.zeros(n_in) if f_star is None else np.asarray(f_star, dtype=np.float64).reshape(-1)
    if fs.size != n_in:
        raise ValueError(f"reference must have {n_in} pixels")
    bounds = bounds or compute_neuron_bounds(net, (np.zeros(n_in), np.full(n_in, omega)))
    bld = ModelBuilder()
    nv = encode_into(bld, net, bounds)
    y = nv.output
    u = bld.ub[y]
    if u_bar is not None:
        u = min(u, float(u_bar) * (1 + 1e-9) + 1e-12)
        bld.ub[y] = u
    e = bld.var("e", 0.0, 1.0, binary=True)
    w = bld.var("w", 0.0, u)
    bld.add_le({w: 1.0, e: -u}, 0.0)
    bld.add_le({w: 1.0, y: -1.0}, 0.0)
    bld.add_le({y: 1.0, w: -1.0, e: u}, u)
    bld.add_obj(w, 2.0 * edge_scale)
    bld.add_obj(y, -edge_scale)
    bld.add_obj(e, -T)
    bld.const += T

    for j, fj in enumerate(nv.inputs):
        bld.add_obj(fj, -alpha * omega + 2.0 * beta * fs[j])
        if combine_terms:
            if alpha != beta:
                bld.add_quad(fj, alpha - beta)
        else:
            if alpha:
                bld.add_quad(fj, alpha)
            if beta:
                bld.add_quad(fj, -beta)
    bld.const -= beta * float(fs @ fs)

    def completion(xr, lb, ub):
        f = np.clip(xr[nv.inputs], lb[nv.inputs], ub[nv.inputs])
        x = forward_assignment(net, nv, f, np.zeros(lb.size))
        if not _pattern_fix(nv, x, lb, ub):
            return None
        yv = min(x[y], u)
        if lb[e] == ub[e]:
            ev = lb[e]
        else:
            ev = 1.0 if edge_scale * yv >= T - edge_scale * yv else 0.0
        x[e] = ev
        x[w] = ev * yv
        return x

    return bld.build(groups=_groups(nv, e=e, w=w, y=y), completion=completion)


def window_objective(net: EdgeNet, f, T, alpha, beta, omega, f_star=None, edge_scale=1.0) -> float:
    """Exact value of the window objective at pixels ``f`` with the best edge flag."""
    f = np.asarray(f, dtype=np.float64).reshape(-1)
    fs = np.zeros_like(f) if f_star is None else np.asarray(f_star, dtype=np.float64).reshape(-1)
    Y = edge_scale * float(net.forward(f))
    return max(Y, T - Y) - alpha * float(np.sum((omega - f) * f)) - beta * float(np.sum((f - fs) ** 2))
