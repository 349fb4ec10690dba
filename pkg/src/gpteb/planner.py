"""Obstacle augmentation by the y-dependent TEB and lattice trajectory planning.

The planner state is a point on a uniform x-y lattice. One planning step moves
by at most ``floor(speed * dt / res)`` cells per axis (the infinity-norm speed
box), so every lattice path is an exact solution of the Euler-discretized
single integrator.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .grid import GridSpec, ScalarField, save_field

_TOL = 1e-9

Box = tuple[tuple[float, float], tuple[float, float]]


def _as_box(b) -> Box:
    (x0, y0), (x1, y1) = b
    x0, y0, x1, y1 = float(x0), float(y0), float(x1), float(y1)
    if not (x1 >= x0 and y1 >= y0):
        raise ValueError(f"box {b} has upper corner below lower corner")
    return (x0, y0), (x1, y1)


@dataclass
class Workspace:
    """Planar planning domain.

    ``obstacles`` are axis-aligned boxes ``((x0, y0), (x1, y1))`` of the true
    obstacle set; ``footprint_radius`` dilates them (vessel size) before any TEB
    augmentation. Lattice nodes sit at ``lo + k * res``.
    """

    lo: tuple[float, float]
    hi: tuple[float, float]
    res: float
    obstacles: list
    goal: Box
    reference: tuple[float, float]
    footprint_radius: float = 0.0
    lattice: GridSpec = field(init=False)
    obstacle_mask: np.ndarray = field(init=False)
    goal_mask: np.ndarray = field(init=False)

    def __post_init__(self):
        self.lo = (float(self.lo[0]), float(self.lo[1]))
        self.hi = (float(self.hi[0]), float(self.hi[1]))
        self.res = float(self.res)
        if self.res <= 0:
            raise ValueError("res must be positive")
        if self.footprint_radius < 0:
            raise ValueError("footprint_radius must be non-negative")
        n = []
        for a in range(2):
            cells = (self.hi[a] - self.lo[a]) / self.res
            if cells < 1 or abs(cells - round(cells)) > 1e-6:
                raise ValueError(f"workspace extent on axis {a} must be a positive multiple of res")
            n.append(int(round(cells)) + 1)
        self.obstacles = [_as_box(b) for b in self.obstacles]
        self.goal = _as_box(self.goal)
        self.reference = (float(self.reference[0]), float(self.reference[1]))
        self.lattice = GridSpec(self.lo, self.hi, tuple(n), names=("x", "y"))
        self.obstacle_mask = self.footprint_mask()
        self.goal_mask = self._box_mask(self.goal)
        if not self.goal_mask.any():
            raise ValueError("goal box contains no lattice node")
        if not self._in_box(self.reference, self.goal):
            raise ValueError("reference point must lie inside the goal box")
        if (self.goal_mask & self.obstacle_mask).any():
            raise ValueError("goal region intersects the obstacle raster")

    @staticmethod
    def _in_box(p, box) -> bool:
        (x0, y0), (x1, y1) = box
        return x0 - _TOL <= p[0] <= x1 + _TOL and y0 - _TOL <= p[1] <= y1 + _TOL

    def nodes(self):
        xs, ys = self.lattice.axes()
        return xs, ys

    def _box_mask(self, box) -> np.ndarray:
        xs, ys = self.nodes()
        (x0, y0), (x1, y1) = box
        mx = (xs >= x0 - _TOL) & (xs <= x1 + _TOL)
        my = (ys >= y0 - _TOL) & (ys <= y1 + _TOL)
        return mx[:, None] & my[None, :]

    def footprint_mask(self) -> np.ndarray:
        """Lattice nodes whose cell comes within ``footprint_radius`` of a true obstacle box."""
        xs, ys = self.nodes()
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        h = 0.5 * self.res
        out = np.zeros(X.shape, dtype=bool)
        for (x0, y0), (x1, y1) in self.obstacles:
            dx = np.maximum(np.maximum(x0 - X, X - x1) - h, 0.0)
            dy = np.maximum(np.maximum(y0 - Y, Y - y1) - h, 0.0)
            out |= np.hypot(dx, dy) <= self.footprint_radius + _TOL
        return out

    def collides(self, point) -> bool:
        """True if ``point`` lies within the footprint radius of a true obstacle."""
        x, y = point
        for (x0, y0), (x1, y1) in self.obstacles:
            dx = max(x0 - x, x - x1, 0.0)
            dy = max(y0 - y, y - y1, 0.0)
            if math.hypot(dx, dy) < self.footprint_radius - _TOL:
                return True
        return False

    def node_index(self, p) -> tuple[int, int]:
        """Lattice index of a point that must sit on a node."""
        idx = []
        for a in range(2):
            u = (p[a] - self.lo[a]) / self.res
            k = int(round(u))
            if abs(u - k) > 1e-6 or not 0 <= k < self.lattice.n[a]:
                raise DomainError(f"point {tuple(p)} is not a lattice node of the workspace")
            idx.append(k)
        return idx[0], idx[1]

    def to_json(self) -> dict:
        return {
            "lo_m": list(self.lo),
            "hi_m": list(self.hi),
            "res_m": self.res,
            "obstacles_m": [[list(a), list(b)] for a, b in self.obstacles],
            "goal_m": [list(self.goal[0]), list(self.goal[1])],
            "reference_m": list(self.reference),
            "footprint_radius_m": self.footprint_radius,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Workspace":
        return cls(
            tuple(d["lo_m"]),
            tuple(d["hi_m"]),
            d["res_m"],
            [tuple(map(tuple, b)) for b in d.get("obstacles_m", [])],
            tuple(map(tuple, d["goal_m"])),
            tuple(d["reference_m"]),
            d.get("footprint_radius_m", 0.0),
        )


def augment_obstacles(w: Workspace, teb) -> np.ndarray:
    """Planner-lattice mask of the augmented obstacle set.

    A planner node ``p`` is blocked when ``p + b`` hits the footprint-dilated
    obstacle for some TEB member ``b`` taken from the projection at the
    obstacle's own y. Each TEB node stands for its whole grid cell and each
    obstacle node for its lattice cell, and the projection is the union over
    every y that cell can touch, so rounding only ever grows the set.
    """
    plane = teb.plane
    hx, hy = plane.spacing
    bx, by = plane.axes()
    xs, ys = w.nodes()
    res = w.res
    obst = w.obstacle_mask
    out = obst.copy()
    if not obst.any():
        return out
    y_nodes = teb.y_nodes if teb.y_axis is not None else None
    # obstacle cells as intervals; offset b maps a blocked cell around o to p in o - b +- (res + h) / 2
    oi, oj = np.nonzero(obst)
    rows = {}
    for i, j in zip(oi, oj):
        rows.setdefault(j, []).append(i)
    half_x = 0.5 * (res + hx)
    half_y = 0.5 * (res + hy)
    for j, iis in rows.items():
        yo = ys[j]
        y0, y1 = yo - 0.5 * res, yo + 0.5 * res
        if y_nodes is not None:
            if y1 < y_nodes[0] - _TOL or y0 > y_nodes[-1] + _TOL:
                raise DomainError(f"obstacle row y={yo:.4g} outside the TEB projection table")
            y0 = max(y0, y_nodes[0])
            y1 = min(y1, y_nodes[-1])
        mask = teb.projection_over(y0, y1)
        if not mask.any():
            continue
        ki, kj = np.nonzero(mask)
        ox = xs[np.array(iis)]
        for dy_off in np.unique(kj):
            bxs = bx[ki[kj == dy_off]]
            cy = yo - by[dy_off]
            jy = np.flatnonzero(np.abs(ys - cy) <= half_y + _TOL)
            if jy.size == 0:
                continue
            cx = (ox[:, None] - bxs[None, :]).ravel()
            hit = np.zeros(xs.size, dtype=bool)
            for c in np.unique(cx):
                hit |= np.abs(xs - c) <= half_x + _TOL
            out[np.ix_(hit, jy)] = True
    return out


@dataclass
class PlanTrajectory:
    dt: float
    points: np.ndarray
    inputs: np.ndarray
    feasible: bool
    horizon: int
    cost: float = math.inf
    attempts: list = field(default_factory=list)
    arrival_step: int | None = None

    @property
    def duration(self) -> float:
        """Time at which the plan first enters the goal (the whole horizon if it never does)."""
        k = self.horizon if self.arrival_step is None else self.arrival_step
        return k * self.dt

    def at(self, t: float) -> np.ndarray:
        """Planner position at time ``t`` under the piecewise-constant inputs (held after the end)."""
        if len(self.points) == 0:
            raise ValueError("empty trajectory")
        k = int(math.floor(t / self.dt + 1e-12))
        if k >= self.horizon:
            return self.points[-1].copy()
        k = max(k, 0)
        return self.points[k] + (t - k * self.dt) * self.inputs[k]

    def input_at(self, t: float) -> np.ndarray:
        k = int(math.floor(t / self.dt + 1e-12))
        if k >= self.horizon or k < 0:
            return np.zeros(2)
        return self.inputs[k].copy()

    def to_json(self) -> dict:
        return {
            "dt_s": self.dt,
            "feasible": self.feasible,
            "horizon": self.horizon,
            "cost": self.cost if math.isfinite(self.cost) else None,
            "arrival_step": self.arrival_step,
            "duration_s": self.duration if self.feasible else None,
            "attempts": list(self.attempts),
            "points_m": self.points.tolist(),
            "inputs_mps": self.inputs.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "PlanTrajectory":
        return cls(
            float(d["dt_s"]),
            np.asarray(d["points_m"], dtype=float).reshape(-1, 2),
            np.asarray(d["inputs_mps"], dtype=float).reshape(-1, 2),
            bool(d["feasible"]),
            int(d["horizon"]),
            math.inf if d.get("cost") is None else float(d["cost"]),
            list(d.get("attempts", [])),
            d.get("arrival_step"),
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["k", "t", "x_p", "y_p", "u_px", "u_py"])
            for k, p in enumerate(self.points):
                u = self.inputs[k] if k < len(self.inputs) else (0.0, 0.0)
                wr.writerow([k, repr(k * self.dt), repr(float(p[0])), repr(float(p[1])), repr(float(u[0])), repr(float(u[1]))])


def _moves(step: int) -> list[tuple[int, int]]:
    """Lattice moves in the speed box, ordered by (inf-norm, dx, dy) for deterministic ties."""
    m = [(a, b) for a in range(-step, step + 1) for b in range(-step, step + 1)]
    return sorted(m, key=lambda d: (max(abs(d[0]), abs(d[1])), d[0], d[1]))


def _move_allowed(free: np.ndarray, d) -> np.ndarray:
    """Nodes from which move ``d`` lands in bounds with the whole swept cell rectangle free."""
    nx, ny = free.shape
    ok = np.zeros_like(free)
    dx, dy = d
    xs = range(min(0, dx), max(0, dx) + 1)
    ys = range(min(0, dy), max(0, dy) + 1)
    i0, i1 = max(0, -min(0, dx)), nx - max(0, dx)
    j0, j1 = max(0, -min(0, dy)), ny - max(0, dy)
    if i0 >= i1 or j0 >= j1:
        return ok
    acc = np.ones((i1 - i0, j1 - j0), dtype=bool)
    for a in xs:
        for b in ys:
            acc &= free[i0 + a:i1 + a, j0 + b:j1 + b]
    ok[i0:i1, j0:j1] = acc
    return ok


def plan(w: Workspace, blocked: np.ndarray, p0, dt: float, T: int, speed: float) -> PlanTrajectory:
    """Exact minimum of ``sum_k |p(k) - ref|^2`` over lattice paths of ``T`` steps ending in the goal.

    Solved by backward dynamic programming on the time-expanded lattice. Moves
    whose swept cell rectangle touches ``blocked`` are excluded.
    """
    if dt <= 0 or speed < 0 or T < 0:
        raise ValueError("dt must be positive, speed and T non-negative")
    blocked = np.asarray(blocked, dtype=bool)
    if blocked.shape != w.lattice.shape:
        raise ValueError("blocked mask does not match the workspace lattice")
    i0, j0 = w.node_index(p0)
    if blocked[i0, j0]:
        raise DomainError("initial planner position lies in the augmented obstacle set")
    free = ~blocked
    step = int(math.floor(speed * dt / w.res + 1e-9))
    moves = _moves(step)
    allowed = [_move_allowed(free, d) for d in moves]
    xs, ys = w.nodes()
    cost = (xs[:, None] - w.reference[0]) ** 2 + (ys[None, :] - w.reference[1]) ** 2
    nx, ny = free.shape
    # J[k] = best cost-to-go from step k; choice[k] = move index
    J = np.where(w.goal_mask & free, cost, np.inf)
    choices = []
    for _ in range(T):
        best = np.full((nx, ny), np.inf)
        arg = np.full((nx, ny), -1, dtype=np.int64)
        for m, (dx, dy) in enumerate(moves):
            cand = np.full((nx, ny), np.inf)
            ii = slice(max(0, -dx), nx - max(0, dx))
            jj = slice(max(0, -dy), ny - max(0, dy))
            tgt = J[max(0, dx):nx + min(0, dx), max(0, dy):ny + min(0, dy)]
            cand[ii, jj] = tgt
            cand[~allowed[m]] = np.inf
            better = cand < best
            best[better] = cand[better]
            arg[better] = m
        J = np.where(free, cost + best, np.inf)
        choices.append(arg)
    choices.reverse()
    if not math.isfinite(J[i0, j0]):
        return PlanTrajectory(dt, np.zeros((0, 2)), np.zeros((0, 2)), False, T)
    pts = [(i0, j0)]
    for k in range(T):
        dx, dy = moves[choices[k][pts[-1]]]
        pts.append((pts[-1][0] + dx, pts[-1][1] + dy))
    P = np.array([[xs[i], ys[j]] for i, j in pts])
    U = np.diff(P, axis=0) / dt if T > 0 else np.zeros((0, 2))
    arrival = next(k for k, (i, j) in enumerate(pts) if w.goal_mask[i, j])
    return PlanTrajectory(dt, P, U, True, T, float(J[i0, j0]), arrival_step=arrival)


def plan_with_growth(w: Workspace, blocked, p0, dt: float, T_max: int, speed: float) -> PlanTrajectory:
    """Try horizons 1, 2, 4, ... (and finally ``T_max``) until one is feasible."""
    if T_max < 1:
        raise ValueError("T_max must be at least 1")
    horizons = []
    T = 1
    while T < T_max:
        horizons.append(T)
        T *= 2
    horizons.append(T_max)
    attempts = []
    result = None
    for T in horizons:
        result = plan(w, blocked, p0, dt, T, speed)
        attempts.append({"horizon": T, "feasible": result.feasible})
        if result.feasible:
            break
    result.attempts = attempts
    return result


def check_trajectory(w: Workspace, blocked, traj: PlanTrajectory, speed: float) -> list[str]:
    """Every violated plan invariant, described; empty when the plan is valid."""
    problems = []
    P, U = traj.points, traj.inputs
    if not traj.feasible:
        return ["trajectory is flagged infeasible"]
    for k in range(traj.horizon):
        if not np.allclose(P[k + 1], P[k] + traj.dt * U[k], atol=1e-9):
            problems.append(f"step {k}: Euler consistency violated")
        if np.abs(U[k]).max() > speed + 1e-9:
            problems.append(f"step {k}: speed box violated")
    for k, p in enumerate(P):
        i, j = w.node_index(p)
        if blocked[i, j]:
            problems.append(f"point {k} lies in the augmented obstacle set")
    i, j = w.node_index(P[-1])
    if not w.goal_mask[i, j]:
        problems.append("final point outside the goal")
    return problems


def save_blocked(w: Workspace, blocked: np.ndarray, path) -> None:
    save_field(ScalarField(w.lattice, blocked.astype(float)), path)
