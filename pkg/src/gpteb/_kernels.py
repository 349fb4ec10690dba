"""Compiled sweep for the upwind numerical Hamiltonian.

Per row i of the game, with one-sided derivatives p+ and p-, the upwinded
transport term is h_i(g) = g p+ if g > 0 else g p-. The adversary enters row i
as an additive interval [-W_i, W_i]; its best response is closed-form (phi
below). The tracker minimum is taken over candidate inputs that contain every
breakpoint of the piecewise-linear objective, which makes it exact.
"""

import numpy as np
from numba import njit

_EPS = 1e-12


@njit(cache=True, inline="always")
def _phi(a, pp, pm, w):
    g1 = a - w
    g2 = a + w
    h1 = g1 * pp if g1 > 0.0 else g1 * pm
    h2 = g2 * pp if g2 > 0.0 else g2 * pm
    f = h1 if h1 > h2 else h2
    if f < 0.0 and -w <= a <= w:
        f = 0.0
    return f


@njit(cache=True, inline="always")
def _astar(pp, pm, w):
    # crossing of the two endpoint branches inside (-w, w), if any
    if pp != pm:
        a = -w * (pp + pm) / (pp - pm)
        if -w < a < w:
            return a
    return w


@njit(cache=True)
def _obj(rows, nr, c, B, pp, pm, W, k1, u1, k2, u2):
    s = 0.0
    for q in range(nr):
        i = rows[q]
        a = c[i] + B[i, k1] * u1
        if k2 >= 0:
            a += B[i, k2] * u2
        s += _phi(a, pp[i], pm[i], W[i])
    return s


@njit(cache=True)
def _clip(x, lo, hi):
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


@njit(cache=True)
def _group_min(rows, nr, c, B, pp, pm, W, k1, k2, lo, hi):
    if k2 < 0:
        best = _obj(rows, nr, c, B, pp, pm, W, k1, lo[k1], -1, 0.0)
        v = _obj(rows, nr, c, B, pp, pm, W, k1, hi[k1], -1, 0.0)
        if v < best:
            best = v
        for qi in range(nr):
            i = rows[qi]
            b = B[i, k1]
            if abs(b) <= _EPS:
                continue
            for q in range(3):
                t = -W[i] if q == 0 else (W[i] if q == 1 else _astar(pp[i], pm[i], W[i]))
                u = _clip((t - c[i]) / b, lo[k1], hi[k1])
                v = _obj(rows, nr, c, B, pp, pm, W, k1, u, -1, 0.0)
                if v < best:
                    best = v
        return best
    best = np.inf
    for q1 in range(2):
        for q2 in range(2):
            u1 = lo[k1] if q1 == 0 else hi[k1]
            u2 = lo[k2] if q2 == 0 else hi[k2]
            v = _obj(rows, nr, c, B, pp, pm, W, k1, u1, k2, u2)
            if v < best:
                best = v
    for qi in range(nr):
        i = rows[qi]
        b1 = B[i, k1]
        b2 = B[i, k2]
        for q in range(3):
            t = -W[i] if q == 0 else (W[i] if q == 1 else _astar(pp[i], pm[i], W[i]))
            rhs = t - c[i]
            for e in range(2):
                if abs(b2) > _EPS:
                    u1 = lo[k1] if e == 0 else hi[k1]
                    u2 = _clip((rhs - b1 * u1) / b2, lo[k2], hi[k2])
                    v = _obj(rows, nr, c, B, pp, pm, W, k1, u1, k2, u2)
                    if v < best:
                        best = v
                if abs(b1) > _EPS:
                    u2 = lo[k2] if e == 0 else hi[k2]
                    u1 = _clip((rhs - b2 * u2) / b1, lo[k1], hi[k1])
                    v = _obj(rows, nr, c, B, pp, pm, W, k1, u1, k2, u2)
                    if v < best:
                        best = v
            for qj in range(qi + 1, nr):
                j = rows[qj]
                det = b1 * B[j, k2] - b2 * B[j, k1]
                if abs(det) <= _EPS:
                    continue
                for q2 in range(3):
                    t2 = -W[j] if q2 == 0 else (W[j] if q2 == 1 else _astar(pp[j], pm[j], W[j]))
                    rhs2 = t2 - c[j]
                    u1 = _clip((rhs * B[j, k2] - b2 * rhs2) / det, lo[k1], hi[k1])
                    u2 = _clip((b1 * rhs2 - rhs * B[j, k1]) / det, lo[k2], hi[k2])
                    v = _obj(rows, nr, c, B, pp, pm, W, k1, u1, k2, u2)
                    if v < best:
                        best = v
    return best


@njit(cache=True)
def node_hamiltonian(pp, pm, c, W, B, lo, hi, grp_inputs, grp_rows, grp_n, free_rows):
    """Upwind numerical Hamiltonian at one node from its derivatives and coefficients."""
    H = 0.0
    for i in free_rows:
        H += _phi(c[i], pp[i], pm[i], W[i])
    for g in range(grp_inputs.shape[0]):
        H += _group_min(grp_rows[g], grp_n[g], c, B, pp, pm, W, grp_inputs[g, 0], grp_inputs[g, 1], lo, hi)
    return H


@njit(cache=True)
def upwind_step(
    V, l, out, dt, shape, strides, periodic, inv_h,
    C, Wd, Bd, lo, hi, grp_inputs, grp_rows, grp_n, free_rows,
):
    """One explicit step ``out = max(l, V + dt * H_up)``; returns (max |update|, min update).

    ``C``, ``Wd`` and ``Bd`` hold the drift, adversary half-width and tracker
    coefficients per node, shaped ``(N, nd)``, ``(N, nd)`` and ``(N, nd, K)``.
    """
    nd = shape.size
    idx = np.zeros(nd, dtype=np.int64)
    pp = np.zeros(nd)
    pm = np.zeros(nd)
    res = 0.0
    mininc = np.inf
    for f in range(V.size):
        v0 = V[f]
        for d in range(nd):
            k = idx[d]
            s = strides[d]
            nn = shape[d]
            if periodic[d]:
                fp = f + s if k < nn - 1 else f - (nn - 1) * s
                fm = f - s if k > 0 else f + (nn - 1) * s
                pp[d] = (V[fp] - v0) * inv_h[d]
                pm[d] = (v0 - V[fm]) * inv_h[d]
            elif k == 0:
                # ghost node equal to the edge value keeps the scheme monotone
                pp[d] = (V[f + s] - v0) * inv_h[d]
                pm[d] = 0.0
            elif k == nn - 1:
                pp[d] = 0.0
                pm[d] = (v0 - V[f - s]) * inv_h[d]
            else:
                pp[d] = (V[f + s] - v0) * inv_h[d]
                pm[d] = (v0 - V[f - s]) * inv_h[d]
        H = node_hamiltonian(pp, pm, C[f], Wd[f], Bd[f], lo, hi, grp_inputs, grp_rows, grp_n, free_rows)
        vn = v0 + dt * H
        lf = l[f]
        if vn < lf:
            vn = lf
        out[f] = vn
        dv = vn - v0
        if abs(dv) > res:
            res = abs(dv)
        if dv < mininc:
            mininc = dv
        # advance the row-major multi-index
        d = nd - 1
        while d >= 0:
            idx[d] += 1
            if idx[d] < shape[d]:
                break
            idx[d] = 0
            d -= 1
    return res, mininc
