"""Infinite-horizon HJ variational inequality for the tracking game.

The value function is time-marched from the stage cost with a monotone upwind
numerical Hamiltonian (exact per-node minimax over the one-sided slopes) and the obstacle freeze ``V <- max(V, l)`` until it
stops changing. From the converged value we extract the TEB level, its
per-y planar projections, and the minimax feedback controller.
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _kernels
from .dynamics import AffineGame, AffineTerms
from .errors import DomainError, InfeasibleError, NumericalError
from .grid import GridSpec, ScalarField, interpolate, interpolate_many, load_field, project_min, save_field

log = logging.getLogger(__name__)

DIVERGENCE_WINDOW = 50


def stage_cost(r) -> float:
    """Planar distance between tracker and planner."""
    return math.hypot(r[0], r[1])


def _nonzero(c) -> bool:
    return not (np.isscalar(c) and c == 0.0) and bool(np.any(np.asarray(c) != 0.0))


def _dot(grad, column):
    """``sum_i grad[i] * column[i]`` over the nonzero coefficients."""
    acc = 0.0
    for g, c in zip(grad, column):
        if _nonzero(c):
            acc = acc + g * c
    return acc


def input_lattice(lo, hi, per_axis: int = 5) -> np.ndarray:
    """All tracker inputs on a ``per_axis``-point lattice of the box (vertices included)."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    if lo.size == 0:
        return np.zeros((1, 0))
    per_axis = max(int(per_axis), 2)
    axes = [np.unique(np.linspace(l, h, per_axis)) for l, h in zip(lo, hi)]
    return np.array(list(itertools.product(*axes)), dtype=float)


def _columns(terms: AffineTerms, n_rows: int, n_cols: int, which: str):
    rows = getattr(terms, which)
    return [[rows[i][k] for i in range(n_rows)] for k in range(n_cols)]


def _point_terms(sys: AffineGame, r):
    return sys.terms([np.float64(v) for v in r])


def _point_limits(sys: AffineGame, r):
    return [(float(lo), float(hi)) for lo, hi in sys.planner_limits([np.float64(v) for v in r])]


def _box_max(coef: float, lo: float, hi: float) -> float:
    return max(coef * lo, coef * hi)


def _adversary_value(terms: AffineTerms, grad, sys: AffineGame, limits) -> float:
    n = sys.n_states
    val = 0.0
    for m, col in enumerate(_columns(terms, n, sys.n_planner, "planner")):
        val += _box_max(float(_dot(grad, col)), *limits[m])
    for col in _columns(terms, n, sys.n_disturbance, "disturbance"):
        val += sys.e_halfwidth * abs(float(_dot(grad, col)))
    return val


def hamiltonian(r, grad, sys: AffineGame, lattice: int = 5) -> tuple[float, np.ndarray]:
    """``min_{u_s} max_{u_p, e} grad . g(r, u_s, u_p, e)`` and the minimizing ``u_s``.

    The inner max is closed-form (vertex selected by coefficient sign). The
    outer min runs over an input lattice; ties go to the smallest-inf-norm
    input, then lexicographic order.
    """
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient must be finite")
    t = _point_terms(sys, r)
    n = sys.n_states
    base = float(_dot(grad, t.drift)) + _adversary_value(t, grad, sys, _point_limits(sys, r))
    coef = np.array([float(_dot(grad, col)) for col in _columns(t, n, sys.n_tracker, "tracker")])
    U = input_lattice(sys.tracker_lo, sys.tracker_hi, lattice)
    vals = base + (U @ coef if coef.size else np.zeros(len(U)))
    best = vals.min()
    tied = np.flatnonzero(vals <= best + 1e-12 * (1.0 + abs(best)))
    if len(tied) > 1:
        norms = np.abs(U[tied]).max(axis=1) if U.shape[1] else np.zeros(len(tied))
        tied = tied[norms <= norms.min() + 1e-15]
        order = sorted(tied, key=lambda k: tuple(U[k]))
        k = order[0]
    else:
        k = tied[0]
    return float(vals[k]), U[k].copy()


def worst_case_inputs(r, grad, sys: AffineGame) -> tuple[np.ndarray, np.ndarray]:
    """Planner input and disturbance vertex maximizing ``grad . g`` at ``r``."""
    grad = np.asarray(grad, dtype=float)
    t = _point_terms(sys, r)
    n = sys.n_states
    limits = _point_limits(sys, r)
    u_p = np.array([
        limits[m][1] if float(_dot(grad, col)) >= 0 else limits[m][0]
        for m, col in enumerate(_columns(t, n, sys.n_planner, "planner"))
    ])
    e = np.array([
        sys.e_halfwidth * (1.0 if float(_dot(grad, col)) >= 0 else -1.0)
        for col in _columns(t, n, sys.n_disturbance, "disturbance")
    ])
    return u_p, e


class _GridHamiltonian:
    """Pre-tabulated game coefficients on a grid, evaluated for whole gradient arrays."""

    def __init__(self, sys: AffineGame, spec: GridSpec):
        self.sys = sys
        self.spec = spec
        coords = spec.coords()
        t = sys.terms(coords)
        n = sys.n_states
        keep = lambda col: [(i, c) for i, c in enumerate(col) if _nonzero(c)]  # noqa: E731
        self.drift = keep(t.drift)
        self.tracker = [keep(col) for col in _columns(t, n, sys.n_tracker, "tracker")]
        self.planner = [keep(col) for col in _columns(t, n, sys.n_planner, "planner")]
        self.dist = [keep(col) for col in _columns(t, n, sys.n_disturbance, "disturbance")]
        self.limits = sys.planner_limits(coords)
        self.alpha = self._dissipation(t, coords)

    def _dissipation(self, t: AffineTerms, coords):
        """Per-axis max |g_i| over the input box at every node."""
        sys = self.sys
        shape = self.spec.shape
        out = []
        for i in range(sys.n_states):
            center = np.asarray(t.drift[i], dtype=float)
            half = 0.0
            for k in range(sys.n_tracker):
                c = t.tracker[i][k]
                if _nonzero(c):
                    lo, hi = sys.tracker_lo[k], sys.tracker_hi[k]
                    center = center + c * 0.5 * (lo + hi)
                    half = half + np.abs(c) * 0.5 * (hi - lo)
            for m in range(sys.n_planner):
                c = t.planner[i][m]
                if _nonzero(c):
                    lo, hi = self.limits[m]
                    center = center + c * 0.5 * (lo + hi)
                    half = half + np.abs(c) * 0.5 * (hi - lo)
            for j in range(sys.n_disturbance):
                c = t.disturbance[i][j]
                if _nonzero(c):
                    half = half + np.abs(c) * sys.e_halfwidth
            out.append(np.broadcast_to(np.abs(center) + half, shape))
        return out

    def __call__(self, grads):
        sys = self.sys
        H = 0.0
        for i, c in self.drift:
            H = H + grads[i] * c
        for k, col in enumerate(self.tracker):
            if not col:
                continue
            coef = 0.0
            for i, c in col:
                coef = coef + grads[i] * c
            H = H + np.minimum(coef * sys.tracker_lo[k], coef * sys.tracker_hi[k])
        for m, col in enumerate(self.planner):
            if not col:
                continue
            coef = 0.0
            for i, c in col:
                coef = coef + grads[i] * c
            lo, hi = self.limits[m]
            H = H + np.maximum(coef * lo, coef * hi)
        if sys.e_halfwidth > 0:
            for col in self.dist:
                if not col:
                    continue
                coef = 0.0
                for i, c in col:
                    coef = coef + grads[i] * c
                H = H + sys.e_halfwidth * np.abs(coef)
        return np.broadcast_to(H, self.spec.shape)


def hamiltonian_grid(sys: AffineGame, spec: GridSpec, grads) -> np.ndarray:
    """Vectorized Hamiltonian (outer min taken at box vertices, exact for affine inputs)."""
    return np.asarray(_GridHamiltonian(sys, spec)(grads))


@dataclass
class ValueFunction:
    field: ScalarField
    converged: bool
    iterations: int
    residual: float
    settings: dict
    residual_history: list = field(default_factory=list)
    min_increment: float = 0.0
    min_slack: float = 0.0

    @property
    def spec(self) -> GridSpec:
        return self.field.spec

    def __call__(self, r) -> float:
        return interpolate(self.field, r)


def _tracker_groups(active_rows):
    """Partition tracker inputs into groups that share rows (at most two inputs each)."""
    K = len(active_rows)
    parent = list(range(K))

    def find(k):
        while parent[k] != k:
            k = parent[k]
        return k

    for a in range(K):
        for b in range(a + 1, K):
            if active_rows[a] & active_rows[b]:
                parent[find(b)] = find(a)
    groups = {}
    for k in range(K):
        if active_rows[k]:
            groups.setdefault(find(k), []).append(k)
    out = []
    for ks in groups.values():
        if len(ks) > 2:
            raise ValueError("the upwind solver supports at most two coupled tracker inputs")
        rows = sorted(set().union(*(active_rows[k] for k in ks)))
        out.append((ks, rows))
    return out


def _kernel_tables(sys: AffineGame, spec: GridSpec):
    """Arguments for :func:`_kernels.upwind_step` after the first four."""
    nd = spec.ndim
    N = spec.size
    coords = spec.coords()
    t = sys.terms(coords)
    limits = sys.planner_limits(coords)
    K = sys.n_tracker
    shape = spec.shape

    def dense(x):
        return np.broadcast_to(np.asarray(x, dtype=np.float64), shape).reshape(N)

    C = np.zeros((N, nd))
    Wd = np.zeros((N, nd))
    Bd = np.zeros((N, nd, max(K, 1)))
    active = [set() for _ in range(K)]
    for i in range(nd):
        if _nonzero(t.drift[i]):
            C[:, i] = dense(t.drift[i])
        for m in range(sys.n_planner):
            if _nonzero(t.planner[i][m]):
                c = dense(t.planner[i][m])
                lo, hi = (dense(b) for b in limits[m])
                C[:, i] += c * 0.5 * (lo + hi)
                Wd[:, i] += np.abs(c) * 0.5 * (hi - lo)
        for j in range(sys.n_disturbance):
            if _nonzero(t.disturbance[i][j]):
                Wd[:, i] += sys.e_halfwidth * np.abs(dense(t.disturbance[i][j]))
        for k in range(K):
            if _nonzero(t.tracker[i][k]):
                Bd[:, i, k] = dense(t.tracker[i][k])
                active[k].add(i)
    groups = _tracker_groups(active)
    used = set().union(*(set(r) for _, r in groups)) if groups else set()
    free_rows = np.array([i for i in range(nd) if i not in used], dtype=np.int64)
    G = len(groups)
    grp_inputs = np.full((G, 2), -1, dtype=np.int64)
    grp_rows = np.zeros((G, nd), dtype=np.int64)
    grp_n = np.zeros(G, dtype=np.int64)
    for g, (ks, rows) in enumerate(groups):
        grp_inputs[g, :len(ks)] = ks
        grp_rows[g, :len(rows)] = rows
        grp_n[g] = len(rows)
    return (
        np.array(spec.shape, dtype=np.int64),
        np.array(spec.strides, dtype=np.int64),
        np.array(spec.periodic, dtype=np.bool_),
        1.0 / np.array(spec.spacing),
        C, Wd, Bd,
        sys.tracker_lo.astype(np.float64).copy(), sys.tracker_hi.astype(np.float64).copy(),
        grp_inputs, grp_rows, grp_n, free_rows,
    )


def solve_vi(
    sys: AffineGame,
    spec: GridSpec,
    tol: float = 1e-4,
    max_iters: int = 20000,
    cfl: float = 0.5,
    cost=None,
    progress_every: int = 0,
) -> ValueFunction:
    """March ``V_t = H_up(r, grad V)`` with the freeze ``V >= l`` to steady state.

    At non-periodic edges the missing neighbour is a ghost node holding the
    edge value, which keeps the scheme monotone. Along the position axes this
    cannot change any sublevel set below the smallest edge cost.

    Parameters
    ----------
    sys : AffineGame
        The relative game; tracker minimizes, planner and disturbance maximize.
    spec : GridSpec
        Grid over the relative state. Must have ``sys.n_states`` axes.
    tol : float
        Stop once the largest per-step node update drops below this.
    cost : callable, optional
        Stage cost on broadcast coordinates; defaults to the planar distance.

    Returns
    -------
    ValueFunction
        Includes the residual history, the smallest per-step increment seen
        (non-negative for a monotone scheme) and ``min(V - l)``.
    """
    if spec.ndim != sys.n_states:
        raise ValueError(f"grid has {spec.ndim} axes, game has {sys.n_states} states")
    t0 = time.perf_counter()
    coords = spec.coords()
    if cost is None:
        if spec.ndim >= 2:
            l = np.hypot(coords[0], coords[1])
        else:
            l = np.abs(coords[0])
    else:
        l = cost(*coords)
    l = np.ascontiguousarray(np.broadcast_to(l, spec.shape), dtype=np.float64)
    ham = _GridHamiltonian(sys, spec)
    h = spec.spacing
    rate = sum(a / hi for a, hi in zip(ham.alpha, h))
    max_rate = float(np.max(rate))
    dt = cfl / max_rate if max_rate > 0 else 1.0
    kernel_args = _kernel_tables(sys, spec)

    V = l.ravel().copy()
    lf = l.ravel()
    Vn = np.empty_like(V)
    history = []
    min_inc = math.inf
    growing = 0
    converged = False
    res = math.inf
    it = 0
    for it in range(1, max_iters + 1):
        res, inc = _kernels.upwind_step(V, lf, Vn, dt, *kernel_args)
        min_inc = min(min_inc, inc)
        if history and res > history[-1]:
            growing += 1
        else:
            growing = 0
        history.append(res)
        V, Vn = Vn, V
        if not math.isfinite(res):
            raise NumericalError(f"value function became non-finite at iteration {it}")
        if progress_every and it % progress_every == 0:
            log.info("solve_vi iter %d residual %.3e", it, res)
        if res < tol:
            converged = True
            break
        if growing >= DIVERGENCE_WINDOW:
            raise NumericalError(
                f"residual grew for {DIVERGENCE_WINDOW} consecutive steps (now {res:.3e}); "
                f"dissipation coefficients max per axis = {[float(np.max(a)) for a in ham.alpha]}"
            )
    V = V.reshape(spec.shape)
    settings = {
        "tol": tol,
        "max_iters": max_iters,
        "cfl": cfl,
        "dt": dt,
        "alpha_max": [float(np.max(a)) for a in ham.alpha],
        "wall_s": time.perf_counter() - t0,
    }
    return ValueFunction(
        ScalarField(spec, V),
        converged,
        it,
        res,
        settings,
        history,
        min_inc,
        float(np.min(V - l)),
    )


def compute_vbar(v: ValueFunction, y_axis: int | None, y_range: Sequence[float] | None) -> float:
    """Max over y-nodes in ``y_range`` of the min of V over all other axes."""
    vals = v.field.values
    spec = v.spec
    if y_axis is None:
        return float(vals.min())
    if not 0 <= y_axis < spec.ndim:
        raise ValueError(f"y_axis {y_axis} outside grid")
    idx = _y_nodes(spec, y_axis, y_range)
    per_y = project_min(v.field, [y_axis]).values
    return float(per_y[idx].max())


def _y_nodes(spec: GridSpec, y_axis: int, y_range) -> np.ndarray:
    ys = spec.axis(y_axis)
    lo, hi = (spec.lo[y_axis], spec.hi[y_axis]) if y_range is None else y_range
    if lo > hi:
        raise ValueError("y_range is empty")
    if lo < spec.lo[y_axis] - 1e-9 or hi > spec.hi[y_axis] + 1e-9:
        raise ValueError(f"y_range {lo, hi} leaves the grid's y extent")
    idx = np.flatnonzero((ys >= lo - 1e-9) & (ys <= hi + 1e-9))
    if idx.size == 0:
        raise ValueError(f"no y nodes inside {lo, hi}")
    return idx


@dataclass
class Teb:
    """Sublevel set ``{V <= vbar}`` with per-y planar projections.

    ``proj_min[k]`` is V minimized over every axis except (x_r, y_r) at the
    k-th y node; ``masks[k]`` thresholds it at ``vbar + slack``.
    """

    value: ValueFunction
    vbar: float
    y_axis: int | None
    y_range: tuple[float, float] | None
    plane: GridSpec
    y_nodes: np.ndarray
    proj_min: np.ndarray
    masks: np.ndarray
    slack: float = 0.0

    @property
    def level(self) -> float:
        """Threshold used for the planar projections."""
        return self.vbar + self.slack

    def contains(self, r, margin: float = 0.0) -> bool:
        return self.value(r) <= self.vbar + margin

    def _bracket(self, y: float) -> list[int]:
        if self.y_axis is None:
            return [0]
        ys = self.y_nodes
        if y < ys[0] - 1e-9 or y > ys[-1] + 1e-9:
            raise DomainError(f"y={y:.4g} outside the TEB projection table [{ys[0]:.4g}, {ys[-1]:.4g}]")
        k = int(np.searchsorted(ys, y))
        if k < len(ys) and abs(ys[k] - y) < 1e-9:
            return [k]
        return [max(k - 1, 0), min(k, len(ys) - 1)]

    def projection_at(self, y: float) -> np.ndarray:
        """Planar TEB mask at global ``y``; between nodes, the union of the two neighbours."""
        out = np.zeros(self.plane.shape, dtype=bool)
        for k in self._bracket(y):
            out |= self.masks[k]
        return out

    def projection_over(self, y0: float, y1: float) -> np.ndarray:
        """Union of the planar masks for every global y in ``[y0, y1]``."""
        if self.y_axis is None:
            return self.masks[0].copy()
        out = self.projection_at(y0) | self.projection_at(y1)
        inside = (self.y_nodes > y0) & (self.y_nodes < y1)
        if inside.any():
            out |= self.masks[inside].any(axis=0)
        return out

    def area(self, y: float) -> float:
        dx, dy = self.plane.spacing
        return float(self.projection_at(y).sum()) * dx * dy

    def offsets(self, y: float) -> np.ndarray:
        """Member (x_r, y_r) nodes of the projection at ``y`` as an ``(m, 2)`` array."""
        mask = self.projection_at(y)
        xs, ys = self.plane.axes()
        i, j = np.nonzero(mask)
        return np.stack([xs[i], ys[j]], axis=1)

    def radius(self, y: float) -> float:
        off = self.offsets(y)
        return float(np.hypot(off[:, 0], off[:, 1]).max()) if len(off) else 0.0


def extract_teb(
    v: ValueFunction,
    vbar: float,
    y_axis: int | None = None,
    y_range: Sequence[float] | None = None,
    position_axes: tuple[int, int] = (0, 1),
    check_interior: bool = True,
    slack: float = 0.0,
) -> Teb:
    """Build the TEB at level ``vbar`` and its projections onto (x_r, y_r).

    ``slack`` widens the projections to ``V <= vbar + slack``. The discrete
    value function approximates the flat minimum of V at ``vbar`` only to
    within a few hundredths, so at the y that attains ``vbar`` the literal set
    can shrink to a single node; a one-cell slack restores the plateau.

    Raises :class:`InfeasibleError` if a projection inside ``y_range`` is empty
    and :class:`DomainError` if the set touches the planar grid boundary.
    """
    if not math.isfinite(vbar):
        raise ValueError("vbar must be finite")
    if not (math.isfinite(slack) and slack >= 0):
        raise ValueError("slack must be finite and non-negative")
    spec = v.spec
    px, py = position_axes
    vals = v.field.values
    if y_axis is None:
        drop = tuple(a for a in range(spec.ndim) if a not in (px, py))
        proj = vals.min(axis=drop)[None] if drop else vals[None]
        y_nodes = np.zeros(1)
        check = [0]
    else:
        drop = tuple(a for a in range(spec.ndim) if a not in (px, py, y_axis))
        proj = vals.min(axis=drop) if drop else vals
        # remaining axes are (px, py, y_axis) in ascending order; move y first
        order = sorted((px, py, y_axis))
        proj = np.moveaxis(proj, order.index(y_axis), 0)
        y_nodes = spec.axis(y_axis)
        check = _y_nodes(spec, y_axis, y_range)
    masks = proj <= vbar + slack
    for k in check:
        if not masks[k].any():
            where = "" if y_axis is None else f" at y={y_nodes[k]:.4g}"
            raise InfeasibleError(f"TEB projection is empty{where} (vbar={vbar:.4g})")
        if check_interior:
            m = masks[k]
            if m[0, :].any() or m[-1, :].any() or m[:, 0].any() or m[:, -1].any():
                raise DomainError(
                    f"TEB projection touches the planar grid boundary at y={y_nodes[k]:.4g}; enlarge the x_r/y_r extent"
                )
    plane = spec.subspec([px, py])
    return Teb(
        v,
        float(vbar),
        y_axis,
        None if y_range is None else (float(y_range[0]), float(y_range[1])),
        plane,
        y_nodes,
        proj,
        masks,
        float(slack),
    )


def value_gradient(v: ValueFunction, r) -> np.ndarray:
    """Central differences of the interpolated value with one-cell steps."""
    spec = v.spec
    r = np.asarray(r, dtype=float)
    if not spec.contains(r):
        raise DomainError(f"relative state {np.round(r, 4).tolist()} outside the value grid")
    pts = []
    steps = []
    for i in range(spec.ndim):
        h = spec.spacing[i]
        a, b = r.copy(), r.copy()
        if spec.periodic[i]:
            a[i] -= h
            b[i] += h
        else:
            a[i] = max(r[i] - h, spec.lo[i])
            b[i] = min(r[i] + h, spec.hi[i])
        pts += [a, b]
        steps.append(b[i] - a[i])
    vals = interpolate_many(v.field, np.array(pts))
    return np.array([(vals[2 * i + 1] - vals[2 * i]) / steps[i] for i in range(spec.ndim)])


def safe_control(v: ValueFunction, r, sys: AffineGame, lattice: int = 5) -> np.ndarray:
    """Minimax feedback ``argmin_{u_s} max_{u_p, e} grad V(r) . g``."""
    grad = value_gradient(v, r)
    return hamiltonian(r, grad, sys, lattice)[1]


PERSISTED_SETTINGS = ("tol", "max_iters", "cfl", "dt", "alpha_max")


def save_value(v: ValueFunction, field_path, sidecar_path, residual_path) -> None:
    """Field file, JSON sidecar and residual-history CSV.

    Wall-clock time is left out so re-runs produce identical files.
    """
    save_field(v.field, field_path)
    meta = {
        "converged": v.converged,
        "iterations": v.iterations,
        "residual": v.residual,
        "min_increment": v.min_increment,
        "min_slack": v.min_slack,
        "settings": {k: v.settings[k] for k in PERSISTED_SETTINGS if k in v.settings},
    }
    with open(sidecar_path, "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    with open(residual_path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iteration", "residual"])
        for k, r in enumerate(v.residual_history, 1):
            wr.writerow([k, repr(float(r))])


def load_value(field_path, sidecar_path, residual_path=None) -> ValueFunction:
    fld = load_field(field_path)
    with open(sidecar_path, encoding="utf-8") as fh:
        meta = json.load(fh)
    history = []
    if residual_path is not None:
        with open(residual_path, newline="", encoding="utf-8") as fh:
            rd = csv.reader(fh)
            next(rd)
            history = [float(row[1]) for row in rd]
    return ValueFunction(fld, bool(meta["converged"]), int(meta["iterations"]), float(meta["residual"]),
                         dict(meta["settings"]), history, float(meta["min_increment"]), float(meta["min_slack"]))


def teb_to_json(teb: Teb, sample_ys: Sequence[float] = ()) -> dict:
    """TEB level, axis layout and per-y projection areas (the masks follow from the value field)."""
    out = {
        "vbar": teb.vbar,
        "slack": teb.slack,
        "y_axis": teb.y_axis,
        "y_range": None if teb.y_range is None else list(teb.y_range),
        "plane": teb.plane.to_json(),
        "y_nodes": [float(y) for y in teb.y_nodes],
        "area_per_y_node": [float(m.sum()) * teb.plane.spacing[0] * teb.plane.spacing[1] for m in teb.masks],
    }
    if sample_ys:
        out["area_at"] = {f"{y:g}": teb.area(y) for y in sample_ys}
    return out
