"""Hot numeric kernels.

Every kernel has a numba path and a pure-numpy path.  ``USE_NUMBA`` (see
``_accel``) selects which one the public wrappers call; both are importable
directly so the benchmark and the equivalence tests can exercise each.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

_AXIS_EPS = 1e-12
_SEG_EPS = 1e-12


# ---------------------------------------------------------------------------
# Siddon ray tracing
# ---------------------------------------------------------------------------

def _ray_crossings_numpy(c, s, t, side):
    half = side / 2.0
    lines = np.arange(side + 1, dtype=np.float64) - half
    pts = []
    if abs(s) > _AXIS_EPS:
        # x(u) = t*c - u*s
        pts.append((t * c - lines) / s)
        lo_x, hi_x = sorted(((t * c - half) / s, (t * c + half) / s))
    else:
        if not (-half < t * c < half):
            return None
        lo_x, hi_x = -np.inf, np.inf
    if abs(c) > _AXIS_EPS:
        # y(u) = t*s + u*c
        pts.append((lines - t * s) / c)
        lo_y, hi_y = sorted(((-half - t * s) / c, (half - t * s) / c))
    else:
        if not (-half < t * s < half):
            return None
        lo_y, hi_y = -np.inf, np.inf
    u0, u1 = max(lo_x, lo_y), min(hi_x, hi_y)
    if u1 - u0 <= _SEG_EPS:
        return None
    u = np.concatenate(pts)
    u = u[(u >= u0) & (u <= u1)]
    u = np.unique(np.concatenate((u, [u0, u1])))
    return u


def trace_ray_numpy(theta, t, side):
    """Pixels hit by one ray and the chord length inside each.

    ``theta`` in radians, ``t`` the signed detector offset in pixel units.
    Returns ``(cols, lengths)`` with row-major pixel indices.
    """
    c, s = math.cos(theta), math.sin(theta)
    u = _ray_crossings_numpy(c, s, t, side)
    if u is None:
        return np.empty(0, np.int64), np.empty(0, np.float64)
    du = np.diff(u)
    keep = du > _SEG_EPS
    mid = 0.5 * (u[1:] + u[:-1])[keep]
    du = du[keep]
    half = side / 2.0
    x = t * c - mid * s
    y = t * s + mid * c
    col = np.clip(np.floor(x + half).astype(np.int64), 0, side - 1)
    row = np.clip(np.floor(half - y).astype(np.int64), 0, side - 1)
    return row * side + col, du


def trace_rays_numpy(thetas, offsets, side):
    """Ray-major COO triples for all (angle, offset) pairs, numpy path."""
    rows, cols, vals = [], [], []
    n_off = len(offsets)
    for a, th in enumerate(thetas):
        for k, t in enumerate(offsets):
            pix, w = trace_ray_numpy(th, t, side)
            rows.append(np.full(pix.size, a * n_off + k, np.int64))
            cols.append(pix)
            vals.append(w)
    if not rows:
        return np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


@njit
def _trace_rays_nb(thetas, offsets, side):
    n_off = offsets.shape[0]
    n_rays = thetas.shape[0] * n_off
    cap = 2 * side + 4
    out_c = np.empty((n_rays, cap), np.int64)
    out_w = np.empty((n_rays, cap), np.float64)
    count = np.zeros(n_rays, np.int64)
    half = side / 2.0
    buf = np.empty(2 * side + 4, np.float64)
    for a in range(thetas.shape[0]):
        c = math.cos(thetas[a])
        s = math.sin(thetas[a])
        for k in range(n_off):
            ray = a * n_off + k
            t = offsets[k]
            lo = -np.inf
            hi = np.inf
            ok = True
            if abs(s) > _AXIS_EPS:
                p = (t * c - half) / s
                q = (t * c + half) / s
                lo = max(lo, min(p, q))
                hi = min(hi, max(p, q))
            elif not (-half < t * c < half):
                ok = False
            if abs(c) > _AXIS_EPS:
                p = (-half - t * s) / c
                q = (half - t * s) / c
                lo = max(lo, min(p, q))
                hi = min(hi, max(p, q))
            elif not (-half < t * s < half):
                ok = False
            if not ok or hi - lo <= _SEG_EPS:
                continue
            nb = 0
            buf[nb] = lo
            nb += 1
            buf[nb] = hi
            nb += 1
            for i in range(side + 1):
                line = i - half
                if abs(s) > _AXIS_EPS:
                    u = (t * c - line) / s
                    if lo < u < hi:
                        buf[nb] = u
                        nb += 1
                if abs(c) > _AXIS_EPS:
                    u = (line - t * s) / c
                    if lo < u < hi:
                        buf[nb] = u
                        nb += 1
            u_sorted = np.sort(buf[:nb])
            n_seg = 0
            for i in range(nb - 1):
                du = u_sorted[i + 1] - u_sorted[i]
                if du <= _SEG_EPS:
                    continue
                mid = 0.5 * (u_sorted[i + 1] + u_sorted[i])
                x = t * c - mid * s
                y = t * s + mid * c
                col = int(math.floor(x + half))
                row = int(math.floor(half - y))
                col = min(max(col, 0), side - 1)
                row = min(max(row, 0), side - 1)
                out_c[ray, n_seg] = row * side + col
                out_w[ray, n_seg] = du
                n_seg += 1
            count[ray] = n_seg
    total = 0
    for r in range(n_rays):
        total += count[r]
    rows = np.empty(total, np.int64)
    cols = np.empty(total, np.int64)
    vals = np.empty(total, np.float64)
    pos = 0
    for r in range(n_rays):
        for i in range(count[r]):
            rows[pos] = r
            cols[pos] = out_c[r, i]
            vals[pos] = out_w[r, i]
            pos += 1
    return rows, cols, vals


def trace_rays(thetas, offsets, side):
    """COO triples ``(rows, cols, weights)`` for a parallel-beam fan of rays.

    Ray index is ``angle_index * len(offsets) + offset_index``.  Duplicate
    (row, col) pairs cannot occur: a ray crosses each pixel at most once.
    """
    thetas = np.ascontiguousarray(thetas, dtype=np.float64)
    offsets = np.ascontiguousarray(offsets, dtype=np.float64)
    if USE_NUMBA:
        return _trace_rays_nb(thetas, offsets, int(side))
    return trace_rays_numpy(thetas, offsets, int(side))


# ---------------------------------------------------------------------------
# Anisotropic forward differences (replicate boundary) and adjoint
# ---------------------------------------------------------------------------

def grad_numpy(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:-1, :] = img[1:, :] - img[:-1, :]
    gy[:, :-1] = img[:, 1:] - img[:, :-1]
    return gx, gy


def grad_adj_numpy(gx, gy):
    """Adjoint of ``grad_numpy`` (i.e. minus the discrete divergence)."""
    out = np.zeros_like(gx)
    out[:-1, :] -= gx[:-1, :]
    out[1:, :] += gx[:-1, :]
    out[:, :-1] -= gy[:, :-1]
    out[:, 1:] += gy[:, :-1]
    return out


@njit
def _grad_nb(img):
    h, w = img.shape
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            if i + 1 < h:
                gx[i, j] = img[i + 1, j] - img[i, j]
            if j + 1 < w:
                gy[i, j] = img[i, j + 1] - img[i, j]
    return gx, gy


@njit
def _grad_adj_nb(gx, gy):
    h, w = gx.shape
    out = np.zeros_like(gx)
    for i in range(h):
        for j in range(w):
            if i + 1 < h:
                out[i, j] -= gx[i, j]
                out[i + 1, j] += gx[i, j]
            if j + 1 < w:
                out[i, j] -= gy[i, j]
                out[i, j + 1] += gy[i, j]
    return out


def grad(img):
    if USE_NUMBA:
        return _grad_nb(np.ascontiguousarray(img, dtype=np.float64))
    return grad_numpy(img)


def grad_adj(gx, gy):
    if USE_NUMBA:
        return _grad_adj_nb(np.ascontiguousarray(gx, dtype=np.float64),
                            np.ascontiguousarray(gy, dtype=np.float64))
    return grad_adj_numpy(gx, gy)


# ---------------------------------------------------------------------------
# Bounded-variable primal simplex (dense revised form)
# ---------------------------------------------------------------------------

LP_OPTIMAL = 0
LP_INFEASIBLE = 1
LP_ITER_LIMIT = 2


@njit
def _refactor(AT, basis, m):
    B = np.empty((m, m))
    for i in range(m):
        B[:, i] = AT[basis[i]]
    return np.linalg.inv(B)


@njit
def _simplex_phase(A_full, AT, b, cost, lo, hi, x, basis, is_basic, Binv, max_iter, dtol, ptol):
    m = A_full.shape[0]
    N = A_full.shape[1]
    since_refactor = 0
    degenerate_run = 0
    it = 0
    while it < max_iter:
        it += 1
        if since_refactor >= 50:
            Binv[:, :] = _refactor(AT, basis, m)
            rhs = b.copy()
            for j in range(N):
                if not is_basic[j] and x[j] != 0.0:
                    rhs -= AT[j] * x[j]
            xb = Binv @ rhs
            for i in range(m):
                x[basis[i]] = xb[i]
            since_refactor = 0
        cb = np.empty(m)
        for i in range(m):
            cb[i] = cost[basis[i]]
        y = cb @ Binv
        d = cost - y @ A_full
        bland = degenerate_run > 30
        q = -1
        best = 0.0
        direction = 0
        for j in range(N):
            if is_basic[j] or hi[j] - lo[j] <= 0.0:
                continue
            if x[j] <= lo[j] and d[j] < -dtol:
                score = -d[j]
                dirj = 1
            elif x[j] >= hi[j] and d[j] > dtol:
                score = d[j]
                dirj = -1
            else:
                continue
            if bland:
                q = j
                direction = dirj
                break
            if score > best:
                best = score
                q = j
                direction = dirj
        if q < 0:
            return LP_OPTIMAL, it
        alpha = Binv @ AT[q]
        theta = hi[q] - lo[q]
        leave = -1
        leave_to_hi = False
        best_piv = 0.0
        for i in range(m):
            a = direction * alpha[i]
            v = basis[i]
            if a > ptol:
                th = (x[v] - lo[v]) / a
                to_hi = False
            elif a < -ptol:
                if hi[v] == np.inf:
                    continue
                th = (hi[v] - x[v]) / (-a)
                to_hi = True
            else:
                continue
            if th < 0.0:
                th = 0.0
            if th < theta - 1e-12 or (th <= theta + 1e-12 and leave >= 0 and abs(a) > best_piv):
                theta = th
                leave = i
                leave_to_hi = to_hi
                best_piv = abs(a)
        if theta == np.inf:
            # cannot happen with finite structural bounds
            return LP_ITER_LIMIT, it
        if theta <= 1e-12:
            degenerate_run += 1
        else:
            degenerate_run = 0
        x[q] += direction * theta
        for i in range(m):
            x[basis[i]] -= direction * theta * alpha[i]
        if leave < 0:
            x[q] = hi[q] if direction > 0 else lo[q]
            continue
        out = basis[leave]
        x[out] = hi[out] if leave_to_hi else lo[out]
        piv = alpha[leave]
        row = Binv[leave, :] / piv
        for i in range(m):
            if i != leave:
                Binv[i, :] -= alpha[i] * row
        Binv[leave, :] = row
        is_basic[out] = False
        is_basic[q] = True
        basis[leave] = q
        since_refactor += 1
    return LP_ITER_LIMIT, it


@njit
def bounded_simplex(A, b, c, lo, hi, max_iter):
    """Minimise ``c @ x`` s.t. ``A x = b``, ``lo <= x <= hi`` (finite bounds).

    Two-phase primal simplex with one artificial per row.  Returns
    ``(status, x, iterations)``.
    """
    m, n = A.shape
    N = n + m
    A_full = np.zeros((m, N))
    A_full[:, :n] = A
    x = np.zeros(N)
    lo_f = np.zeros(N)
    hi_f = np.full(N, np.inf)
    lo_f[:n] = lo
    hi_f[:n] = hi
    for j in range(n):
        # start each structural at the bound closest to zero
        if abs(hi[j]) < abs(lo[j]):
            x[j] = hi[j]
        else:
            x[j] = lo[j]
    r = b - A @ x[:n]
    Binv = np.zeros((m, m))
    basis = np.empty(m, np.int64)
    is_basic = np.zeros(N, np.bool_)
    for i in range(m):
        sgn = 1.0 if r[i] >= 0.0 else -1.0
        A_full[i, n + i] = sgn
        Binv[i, i] = sgn
        x[n + i] = abs(r[i])
        basis[i] = n + i
        is_basic[n + i] = True

    scale_b = 1.0
    for i in range(m):
        scale_b = max(scale_b, abs(b[i]))
    cmax = 1.0
    for j in range(n):
        cmax = max(cmax, abs(c[j]))
    ptol = 1e-9

    AT = np.ascontiguousarray(A_full.T)
    cost1 = np.zeros(N)
    cost1[n:] = 1.0
    status, it1 = _simplex_phase(A_full, AT, b, cost1, lo_f, hi_f, x, basis, is_basic, Binv,
                                 max_iter, 1e-11, ptol)
    if status != LP_OPTIMAL:
        return status, x[:n].copy(), it1
    infeas = 0.0
    for i in range(m):
        infeas += x[n + i]
    if infeas > 1e-7 * scale_b:
        return LP_INFEASIBLE, x[:n].copy(), it1
    for i in range(m):
        hi_f[n + i] = 0.0
        if not is_basic[n + i]:
            x[n + i] = 0.0

    cost2 = np.zeros(N)
    cost2[:n] = c
    status, it2 = _simplex_phase(A_full, AT, b, cost2, lo_f, hi_f, x, basis, is_basic, Binv,
                                 max_iter, 1e-10 * cmax, ptol)
    # final refactor for accurate basic values
    Binv[:, :] = _refactor(AT, basis, m)
    rhs = b.copy()
    for j in range(N):
        if not is_basic[j] and x[j] != 0.0:
            rhs -= AT[j] * x[j]
    xb = Binv @ rhs
    for i in range(m):
        x[basis[i]] = xb[i]
    out = x[:n].copy()
    for j in range(n):
        if out[j] < lo[j]:
            out[j] = lo[j]
        elif out[j] > hi[j]:
            out[j] = hi[j]
    return status, out, it1 + it2
