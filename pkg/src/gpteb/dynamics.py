"""Continuous-time models: nominal Heron vessel, desk-scale unicycle, planner
integrator, the simulated truth model, and the relative tracker-vs-planner game.

Games are represented in control-affine form

    r_dot = drift(r) + Gs(r) u_s + Gp(r) u_p + Ge(r) e

which is what the HJ solver consumes (see :class:`AffineTerms`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import NumericalError
from .gp import evaluate_uncertainty

UNICYCLE = "unicycle-4D"
HERON = "heron-6D"
MODES = (UNICYCLE, HERON)

STATE_NAMES = {UNICYCLE: ("x", "y", "psi"), HERON: ("x", "y", "psi", "v", "omega")}
DEFAULT_TRACKER_BOX = {UNICYCLE: ((0.0, -1.0), (0.5, 1.0)), HERON: ((-1.0, -1.0), (1.0, 1.0))}


@dataclass(frozen=True)
class HeronParams:
    mass: float = 36.0
    inertia: float = 8.35
    length: float = 0.7366
    f_max: float = 45.0
    x_v: float = 0.0
    n_w: float = 0.0
    x_vv: float = 16.9
    n_ww: float = 13.0

    def __post_init__(self):
        if min(self.mass, self.inertia, self.length, self.f_max) <= 0:
            raise ValueError("mass, inertia, length and f_max must be positive")
        if min(self.x_v, self.n_w, self.x_vv, self.n_ww) < 0:
            raise ValueError("damping coefficients must be non-negative")


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2.0 * np.pi)
    return float(w) if np.ndim(w) == 0 else w


def nominal_heron(s, u, params: HeronParams = HeronParams()) -> np.ndarray:
    x, y, psi, v, w = s
    n1, n2 = u
    p = params
    return np.array([
        v * math.cos(psi),
        v * math.sin(psi),
        w,
        ((n1 + n2) * p.f_max - (p.x_v + p.x_vv * abs(v)) * v) / p.mass,
        ((n1 - n2) * 0.5 * p.length * p.f_max - (p.n_w + p.n_ww * abs(w)) * w) / p.inertia,
    ])


def nominal_unicycle(s, u) -> np.ndarray:
    _, _, psi = s
    v, w = u
    return np.array([v * math.cos(psi), v * math.sin(psi), w])


def planning_model(p, u_p) -> np.ndarray:
    """Single integrator: the planner velocity is the state derivative."""
    return np.asarray(u_p, dtype=float).copy()


def handcrafted_disturbance(y, psi):
    """State-dependent drift on x_dot used by the simulated truth model."""
    return 0.5 * (np.square(y) - 1.0) * (1.0 + np.sqrt(np.square(np.sin(psi))))


def truth_model(
    s,
    u,
    rng: np.random.Generator | None = None,
    *,
    noise=None,
    amplitude: float = 0.02,
    disturbance: bool = True,
) -> np.ndarray:
    """Unicycle kinematics plus the handcrafted x-drift and bounded white noise.

    Noise on (y_dot, psi_dot) is uniform in ``[-amplitude, amplitude]``; pass a
    pre-drawn ``noise`` pair to hold it fixed across integrator stages.
    """
    ds = nominal_unicycle(s, u)
    if disturbance:
        ds[0] += handcrafted_disturbance(s[1], s[2])
    if noise is None:
        noise = draw_truth_noise(rng, amplitude) if rng is not None else (0.0, 0.0)
    if abs(noise[0]) > amplitude + 1e-15 or abs(noise[1]) > amplitude + 1e-15:
        raise ValueError("truth-model noise exceeds its configured amplitude")
    ds[1] += noise[0]
    ds[2] += noise[1]
    return ds


def draw_truth_noise(rng: np.random.Generator, amplitude: float) -> np.ndarray:
    return rng.uniform(-amplitude, amplitude, size=2)


def integrate(f: Callable, s, u, dt: float, scheme: str = "rk4", angle_index: int | None = None) -> np.ndarray:
    """One fixed step of ``s_dot = f(s, u)``.

    ``scheme`` is ``"rk4"`` (simulation) or ``"euler"`` (discretized planner).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    s = np.asarray(s, dtype=float)
    if scheme == "euler":
        out = s + dt * np.asarray(f(s, u), dtype=float)
    elif scheme == "rk4":
        k1 = np.asarray(f(s, u), dtype=float)
        k2 = np.asarray(f(s + 0.5 * dt * k1, u), dtype=float)
        k3 = np.asarray(f(s + 0.5 * dt * k2, u), dtype=float)
        k4 = np.asarray(f(s + dt * k3, u), dtype=float)
        out = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    else:
        raise ValueError(f"unknown scheme {scheme!r}")
    if not np.all(np.isfinite(out)):
        raise NumericalError("integration produced a non-finite state")
    if angle_index is not None:
        out[angle_index] = wrap_angle(out[angle_index])
    return out


@dataclass
class AffineTerms:
    """Coefficients of a control-affine game, each entry an array or scalar
    broadcastable against the evaluation coordinates.

    ``tracker[i][k]`` multiplies tracker input ``k`` in row ``i``; ``planner``
    and ``disturbance`` likewise. Zero entries may be plain ``0.0``.
    """

    drift: list
    tracker: list
    planner: list
    disturbance: list


class AffineGame:
    """Tracker (minimizer) vs planner/disturbance (maximizer) in control-affine form.

    Tracker inputs live in the box ``[tracker_lo, tracker_hi]``; planner inputs
    in :meth:`planner_limits` (``[-planner_bound, planner_bound]`` unless a
    subclass narrows it); disturbance inputs in
    ``[-e_halfwidth, e_halfwidth]``. ``terms_fn(coords)`` returns the
    :class:`AffineTerms` at coordinate arrays (one per state axis).
    """

    def __init__(
        self,
        n_states: int,
        terms_fn: Callable[[Sequence[np.ndarray]], AffineTerms] | None = None,
        tracker_lo=(),
        tracker_hi=(),
        planner_bound=(),
        e_halfwidth: float = 0.0,
        n_disturbance: int = 0,
    ):
        self.n_states = int(n_states)
        self._terms_fn = terms_fn
        self.tracker_lo = np.asarray(tracker_lo, dtype=float).reshape(-1)
        self.tracker_hi = np.asarray(tracker_hi, dtype=float).reshape(-1)
        self.planner_bound = np.asarray(planner_bound, dtype=float).reshape(-1)
        self.e_halfwidth = float(e_halfwidth)
        self.n_disturbance = int(n_disturbance)
        if self.tracker_lo.shape != self.tracker_hi.shape or np.any(self.tracker_hi < self.tracker_lo):
            raise ValueError("tracker input box is malformed")
        if np.any(self.planner_bound < 0) or self.e_halfwidth < 0:
            raise ValueError("planner bounds and disturbance half-width must be non-negative")

    @property
    def n_tracker(self) -> int:
        return self.tracker_lo.size

    @property
    def n_planner(self) -> int:
        return self.planner_bound.size

    def terms(self, coords: Sequence[np.ndarray]) -> AffineTerms:
        return self._terms_fn(coords)

    def planner_limits(self, coords: Sequence[np.ndarray]) -> list:
        """``(lo, hi)`` per planner input, broadcastable against ``coords``."""
        return [(-b, b) for b in self.planner_bound]

    def evaluate(self, r, u_s, u_p, e) -> np.ndarray:
        """``r_dot`` at a single state from the affine decomposition."""
        t = self.terms([np.float64(v) for v in r])
        out = np.zeros(self.n_states)
        for i in range(self.n_states):
            acc = float(t.drift[i])
            acc += sum(float(t.tracker[i][k]) * u_s[k] for k in range(self.n_tracker))
            acc += sum(float(t.planner[i][m]) * u_p[m] for m in range(self.n_planner))
            acc += sum(float(t.disturbance[i][j]) * e[j] for j in range(self.n_disturbance))
            out[i] = acc
        return out


def _zeros(n, m):
    return [[0.0] * m for _ in range(n)]


class RelativeSystem(AffineGame):
    """Tracker-minus-planner dynamics with an additive learned uncertainty.

    The relative state is ``r = Q_s s - Q_p p``: position errors first, then the
    tracking states beyond (x, y), then the global positions the uncertainty
    model reads (appended axes, e.g. ``y``).
    """

    def __init__(
        self,
        mode: str,
        uncertainty=None,
        tracker_lo=None,
        tracker_hi=None,
        planner_speed: float = 0.25,
        params: HeronParams = HeronParams(),
        planner_y_range: tuple[float, float] | None = None,
    ):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        self.mode = mode
        self.params = params
        self.state_dim = len(STATE_NAMES[mode])
        self.uncertainty = uncertainty
        if uncertainty is not None and uncertainty.state_dim != self.state_dim:
            raise ValueError(f"uncertainty model has state_dim {uncertainty.state_dim}, mode needs {self.state_dim}")
        active = tuple(uncertainty.active_axes) if uncertainty is not None else ()
        for a in active:
            if not 0 <= a < self.state_dim:
                raise ValueError(f"active axis {a} outside the tracking state")
        self.appended = tuple(a for a in active if a in (0, 1))
        lo_d, hi_d = DEFAULT_TRACKER_BOX[mode]
        super().__init__(
            n_states=self.state_dim + len(self.appended),
            tracker_lo=lo_d if tracker_lo is None else tracker_lo,
            tracker_hi=hi_d if tracker_hi is None else tracker_hi,
            planner_bound=(planner_speed, planner_speed),
            e_halfwidth=uncertainty.halfwidth if uncertainty is not None else 0.0,
            n_disturbance=self.state_dim,
        )
        if self.n_tracker != 2:
            raise ValueError("tracker input box must have two components")
        # row i of r is driven by tracking component sel[i]
        self.sel = tuple(range(self.state_dim)) + self.appended
        self.Q_s = np.zeros((self.n_states, self.state_dim))
        self.Q_s[np.arange(self.n_states), list(self.sel)] = 1.0
        self.Q_p = np.zeros((self.n_states, 2))
        self.Q_p[0, 0] = self.Q_p[1, 1] = 1.0
        if planner_y_range is not None:
            if self.y_axis is None:
                raise ValueError("planner_y_range needs the global y among the relative states")
            if not planner_y_range[1] > planner_y_range[0]:
                raise ValueError("planner_y_range must be increasing")
            planner_y_range = (float(planner_y_range[0]), float(planner_y_range[1]))
        self.planner_y_range = planner_y_range

    def planner_limits(self, coords: Sequence[np.ndarray]) -> list:
        """Planner input box; with ``planner_y_range`` the planner may only move
        back into the band once ``y_p = y - y_r`` reaches its edge."""
        b = self.planner_bound
        if self.planner_y_range is None:
            return [(-b[0], b[0]), (-b[1], b[1])]
        y0, y1 = self.planner_y_range
        y_p = np.asarray(coords[self.y_axis], dtype=float) - np.asarray(coords[1], dtype=float)
        lo = np.where(y_p <= y0, 0.0, -b[1])
        hi = np.where(y_p >= y1, 0.0, b[1])
        return [(-b[0], b[0]), (lo, hi)]

    @property
    def n_add(self) -> int:
        return len(self.appended)

    @property
    def axis_names(self) -> tuple[str, ...]:
        names = STATE_NAMES[self.mode]
        return ("x_r", "y_r") + names[2:] + tuple(names[a] for a in self.appended)

    @property
    def y_axis(self) -> int | None:
        """Index of the appended global-y axis in r, if present."""
        return self.state_dim + self.appended.index(1) if 1 in self.appended else None

    def relative_state(self, s, p) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        r = self.Q_s @ s - self.Q_p @ np.asarray(p, dtype=float)
        r[2] = wrap_angle(r[2])
        return r

    def tracking_state(self, r) -> np.ndarray:
        """Tracking state implied by ``r``; global coordinates not carried in r are zero."""
        r = np.asarray(r, dtype=float)
        s = np.zeros(self.state_dim)
        s[2:] = r[2:self.state_dim]
        for k, a in enumerate(self.appended):
            s[a] = r[self.state_dim + k]
        return s

    def _nominal(self, s, u):
        if self.mode == UNICYCLE:
            return nominal_unicycle(s, u)
        return nominal_heron(s, u, self.params)

    def relative_dynamics(self, r, u_s, u_p, e) -> np.ndarray:
        """``Q_s (f0(s, u_s) + d(s, e)) - Q_p u_p``."""
        s = self.tracking_state(r)
        e = np.asarray(e, dtype=float).reshape(-1)
        if self.uncertainty is None:
            if np.any(e != 0):
                raise ValueError("nonzero e with no uncertainty model")
            d = np.zeros(self.state_dim)
        else:
            d = evaluate_uncertainty(self.uncertainty, s, e)
        return self.Q_s @ (self._nominal(s, u_s) + d) - self.Q_p @ np.asarray(u_p, dtype=float)

    def uncertainty_tables(self, coords: Sequence[np.ndarray]):
        """Uncertainty mean/std per tracking component, broadcast over ``coords``."""
        n = self.state_dim
        if self.uncertainty is None:
            return [0.0] * n, [0.0] * n
        active = list(self.uncertainty.active_axes)
        if not active:
            mean, std = self.uncertainty.mean_std(np.zeros((1, n)))
            return [float(mean[0, j]) for j in range(n)], [float(std[0, j]) for j in range(n)]
        r_index = {a: (a if a >= 2 else self.state_dim + self.appended.index(a)) for a in active}
        parts = np.broadcast_arrays(*[np.asarray(coords[r_index[a]], dtype=float) for a in active])
        shape = parts[0].shape
        S = np.zeros((parts[0].size, n))
        for a, arr in zip(active, parts):
            S[:, a] = arr.ravel()
        mean, std = self.uncertainty.mean_std(S)
        comps = set(self.uncertainty.components)
        means = [mean[:, j].reshape(shape) if j in comps else 0.0 for j in range(n)]
        stds = [std[:, j].reshape(shape) if j in comps else 0.0 for j in range(n)]
        return means, stds

    def terms(self, coords: Sequence[np.ndarray]) -> AffineTerms:
        n = self.state_dim
        means, stds = self.uncertainty_tables(coords)
        psi = coords[2]
        c, s_ = np.cos(psi), np.sin(psi)
        # input-free part f_free and input matrix B of the nominal model, per tracking component
        if self.mode == UNICYCLE:
            f_free = [0.0, 0.0, 0.0]
            B = [[c, 0.0], [s_, 0.0], [0.0, 1.0]]
        else:
            p = self.params
            v, w = coords[3], coords[4]
            f_free = [
                v * c,
                v * s_,
                w,
                -(p.x_v + p.x_vv * np.abs(v)) * v / p.mass,
                -(p.n_w + p.n_ww * np.abs(w)) * w / p.inertia,
            ]
            kv = p.f_max / p.mass
            kw = 0.5 * p.length * p.f_max / p.inertia
            B = [[0.0, 0.0], [0.0, 0.0], [0.0, 0.0], [kv, kv], [kw, -kw]]
        drift, tracker = [], []
        planner = _zeros(self.n_states, 2)
        dist = _zeros(self.n_states, n)
        for i, j in enumerate(self.sel):
            drift.append(f_free[j] + means[j])
            tracker.append(list(B[j]))
            dist[i][j] = stds[j]
        planner[0][0] = planner[1][1] = -1.0
        return AffineTerms(drift, tracker, planner, dist)

    def default_grid_names(self) -> tuple[str, ...]:
        return self.axis_names
