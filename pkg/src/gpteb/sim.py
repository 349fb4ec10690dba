"""Scenario configuration, residual collection, the end-to-end pipeline and
closed-loop studies against the simulated truth model."""

from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import dynamics as dyn
from .control import SAFE, HybridConfig, hybrid_step
from .dynamics import MODES, UNICYCLE, RelativeSystem, integrate
from .errors import InfeasibleError, NumericalError, SafetyAbort, ValidationError
from .gp import BoxUncertainty, KernelParams, Observation, UncertaintyModel, fit
from .grid import GridSpec
from .hji import ValueFunction, compute_vbar, extract_teb, safe_control, solve_vi, value_gradient, worst_case_inputs
from .planner import PlanTrajectory, Workspace, augment_obstacles, plan_with_growth

log = logging.getLogger(__name__)

CASES = ("gp", "conservative")


def _require(d: dict, key: str, where: str):
    if key not in d:
        raise ValidationError(f"{where}.{key} is required")
    return d[key]


@dataclass
class Scenario:
    """Everything one pipeline run needs, loaded from a single JSON document.

    Units are part of the field names (``_m``, ``_s``, ``_mps``). See
    ``scenarios/sim1.json`` in the package for a complete example.
    """

    raw: dict
    name: str
    mode: str
    seed: int
    tracker_lo: tuple
    tracker_hi: tuple
    planner_speed: float
    planner_dt: float
    horizon_cap: int
    start: tuple
    start_heading: float
    workspace: Workspace
    grid: GridSpec
    y_range: tuple | None
    gp: dict
    truth: dict
    solver: dict
    control: HybridConfig
    sim: dict

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = copy.deepcopy(d)
        try:
            return cls._parse(d)
        except ValidationError:
            raise
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"scenario: {exc}") from exc

    @classmethod
    def _parse(cls, d: dict) -> "Scenario":
        mode = _require(d, "mode", "scenario")
        if mode not in MODES:
            raise ValidationError(f"scenario.mode must be one of {MODES}, got {mode!r}")
        box = _require(d, "tracker_box", "scenario")
        t_lo, t_hi = tuple(map(float, box["lo"])), tuple(map(float, box["hi"]))
        if len(t_lo) != 2 or len(t_hi) != 2 or any(h < l for l, h in zip(t_lo, t_hi)):
            raise ValidationError("scenario.tracker_box must give two-component lo <= hi")
        pl = _require(d, "planner", "scenario")
        speed = float(_require(pl, "speed_mps", "planner"))
        pdt = float(_require(pl, "dt_s", "planner"))
        cap = int(_require(pl, "horizon_cap_steps", "planner"))
        if speed <= 0 or pdt <= 0 or cap < 1:
            raise ValidationError("planner.speed_mps and planner.dt_s must be positive, horizon_cap_steps >= 1")
        start = tuple(map(float, _require(pl, "start_m", "planner")))
        try:
            ws = Workspace.from_json(_require(d, "workspace", "scenario"))
        except ValueError as exc:
            raise ValidationError(f"scenario.workspace: {exc}") from exc
        if not ws.lattice.contains(start):
            raise ValidationError("planner.start_m lies outside the workspace")
        gp = _require(d, "gp", "scenario")
        comps = [int(c) for c in _require(gp, "components", "gp")]
        active = [int(a) for a in _require(gp, "active_axes", "gp")]
        sdim = len(dyn.STATE_NAMES[mode])
        for a in comps + active:
            if not 0 <= a < sdim:
                raise ValidationError(f"gp: axis/component {a} outside the {mode} tracking state")
        if (gp.get("p") is None) == (gp.get("sigma_mult") is None):
            raise ValidationError("gp: set exactly one of p or sigma_mult")
        lo_s, hi_s = gp.get("sample_lo"), gp.get("sample_hi")
        if lo_s is None or hi_s is None or len(lo_s) != len(active) or len(hi_s) != len(active):
            raise ValidationError("gp.sample_lo / gp.sample_hi need one entry per active axis")
        # relative-state layout implied by the uncertainty inputs
        probe = RelativeSystem(mode, None, t_lo, t_hi, speed)
        appended = tuple(a for a in active if a in (0, 1))
        n_states = probe.state_dim + len(appended)
        g = _require(d, "grid", "scenario")
        names = ("x_r", "y_r") + dyn.STATE_NAMES[mode][2:] + tuple(dyn.STATE_NAMES[mode][a] for a in appended)
        periodic = g.get("periodic") or [n == "psi" for n in names]
        try:
            spec = GridSpec(tuple(g["lo"]), tuple(g["hi"]), tuple(g["n"]), tuple(periodic), names)
        except (ValueError, KeyError) as exc:
            raise ValidationError(f"scenario.grid: {exc}") from exc
        if spec.ndim != n_states:
            raise ValidationError(f"scenario.grid has {spec.ndim} axes; {mode} with active axes {active} needs {n_states} ({', '.join(names)})")
        psi = names.index("psi")
        if not spec.periodic[psi]:
            raise ValidationError("scenario.grid: the psi axis must be periodic")
        y_range = None
        if 1 in appended:
            y_range = tuple(map(float, _require(d, "y_range_m", "scenario")))
            y_ax = names.index("y")
            if not (spec.lo[y_ax] - 1e-9 <= y_range[0] <= y_range[1] <= spec.hi[y_ax] + 1e-9):
                raise ValidationError("scenario.y_range_m must lie inside the grid's y axis")
            if ws.lo[1] < y_range[0] - 1e-9 or ws.hi[1] > y_range[1] + 1e-9:
                raise ValidationError("scenario.y_range_m must cover the workspace y extent")
        control = HybridConfig.from_json(d.get("control", {}))
        solver = {"tol": 1e-4, "max_iters": 20000, "cfl": 0.5}
        solver.update(d.get("solver", {}))
        truth = {"disturbance": True, "noise_amplitude": 0.02}
        truth.update(d.get("truth", {}))
        sim = {"trials": 200, "study_horizon_s": 10.0, "settle_s": 5.0}
        sim.update(d.get("sim", {}))
        return cls(
            d, str(d.get("name", "scenario")), mode, int(d.get("seed", 0)), t_lo, t_hi, speed, pdt, cap, start,
            float(pl.get("start_heading_rad", 0.0)), ws, spec, y_range, gp, truth, solver, control, sim,
        )

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            with open(path, encoding="utf-8") as fh:
                d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)

    def to_json(self) -> dict:
        return copy.deepcopy(self.raw)

    @property
    def state_dim(self) -> int:
        return len(dyn.STATE_NAMES[self.mode])

    def system(self, uncertainty=None) -> RelativeSystem:
        # the planner y band only applies when the global y is part of the relative state
        has_y = uncertainty is not None and 1 in tuple(uncertainty.active_axes)
        return RelativeSystem(self.mode, uncertainty, self.tracker_lo, self.tracker_hi, self.planner_speed,
                              planner_y_range=self.y_range if has_y else None)

    def with_overrides(self, **kw) -> "Scenario":
        """Copy with top-level sections patched, e.g. ``gp={"sigma_mult": 2.0}``."""
        d = copy.deepcopy(self.raw)
        for k, v in kw.items():
            if isinstance(v, dict) and isinstance(d.get(k), dict):
                d[k].update(v)
            else:
                d[k] = v
        return Scenario.from_dict(d)


def truth_derivative(scn: Scenario, s, u, noise) -> np.ndarray:
    """Simulated truth: the nominal model plus the handcrafted x-drift and bounded noise."""
    tr = scn.truth
    amp = float(tr["noise_amplitude"])
    if scn.mode == UNICYCLE:
        return dyn.truth_model(s, u, noise=noise, amplitude=amp, disturbance=bool(tr["disturbance"]))
    ds = dyn.nominal_heron(s, u)
    if tr["disturbance"]:
        ds[0] += dyn.handcrafted_disturbance(s[1], s[2])
    if abs(noise[0]) > amp + 1e-15 or abs(noise[1]) > amp + 1e-15:
        raise ValueError("truth-model noise exceeds its configured amplitude")
    ds[1] += noise[0]
    ds[2] += noise[1]
    return ds


def nominal_derivative(scn: Scenario, s, u) -> np.ndarray:
    return dyn.nominal_unicycle(s, u) if scn.mode == UNICYCLE else dyn.nominal_heron(s, u)


def collect_residuals(scn: Scenario, n: int, seed: int) -> list[Observation]:
    """Truth-minus-nominal derivative samples at states drawn uniformly over the GP sampling box.

    One observation per modeled component per sample, with Gaussian
    measurement noise of std ``gp.measurement_noise_std``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    gp = scn.gp
    active = [int(a) for a in gp["active_axes"]]
    lo = np.asarray(gp["sample_lo"], dtype=float)
    hi = np.asarray(gp["sample_hi"], dtype=float)
    sn = float(gp.get("measurement_noise_std", 0.01))
    amp = float(scn.truth["noise_amplitude"])
    out = []
    for _ in range(n):
        s = np.zeros(scn.state_dim)
        s[active] = rng.uniform(lo, hi)
        u = rng.uniform(scn.tracker_lo, scn.tracker_hi)
        noise = rng.uniform(-amp, amp, size=2) if amp > 0 else np.zeros(2)
        resid = truth_derivative(scn, s, u, noise) - nominal_derivative(scn, s, u)
        meas = rng.normal(0.0, sn, size=scn.state_dim) if sn > 0 else np.zeros(scn.state_dim)
        for j in gp["components"]:
            out.append(Observation(s.copy(), float(resid[j] + meas[j]), int(j)))
    return out


def fit_uncertainty(scn: Scenario, obs: Sequence[Observation], case: str = "gp"):
    """GP uncertainty model (``case="gp"``) or the worst-case observation box (``"conservative"``)."""
    gp = scn.gp
    active = tuple(int(a) for a in gp["active_axes"])
    comps = [int(c) for c in gp["components"]]
    if case == "conservative":
        box = BoxUncertainty.from_observations(obs, comps, scn.state_dim)
        return BoxUncertainty(box.lo, box.hi, scn.state_dim, active_axes=active)
    if case != "gp":
        raise ValueError(f"case must be one of {CASES}")
    init_d = gp.get("init", {})
    init = KernelParams(
        float(init_d.get("signal_var", 0.25)),
        tuple(init_d.get("lengthscales", [0.5] * len(active))),
        float(init_d.get("noise_std", 0.01)),
        float(init_d.get("prior_mean", 0.0)),
    )
    models = {}
    for j in comps:
        sub = [o for o in obs if o.component == j]
        models[j] = fit(sub, init, axes=active, n_starts=int(gp.get("n_starts", 4)), seed=scn.seed + j)
    return UncertaintyModel(models, active, scn.state_dim, p=gp.get("p"), sigma_mult=gp.get("sigma_mult"))


@dataclass
class SimLog:
    """Closed-loop record; one row per control step."""

    seed: int
    t: list = field(default_factory=list)
    s: list = field(default_factory=list)
    p: list = field(default_factory=list)
    r: list = field(default_factory=list)
    u: list = field(default_factory=list)
    mode: list = field(default_factory=list)
    value: list = field(default_factory=list)
    collision: bool = False
    aborted: bool = False
    teb_exit_steps: int = 0
    goal_reached: bool = False

    def append(self, t, s, p, r, u, mode, value):
        if self.t and not t > self.t[-1]:
            raise ValueError("log time must increase strictly")
        self.t.append(float(t))
        self.s.append(np.asarray(s, dtype=float).copy())
        self.p.append(np.asarray(p, dtype=float).copy())
        self.r.append(np.asarray(r, dtype=float).copy())
        self.u.append(np.asarray(u, dtype=float).copy())
        self.mode.append(mode)
        self.value.append(float(value))

    @property
    def recovered(self) -> bool:
        """No exit, or the final recorded step is back inside the bound."""
        return self.teb_exit_steps == 0 or (bool(self.inside) and self.inside[-1])

    inside: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "steps": len(self.t),
            "collision": self.collision,
            "aborted": self.aborted,
            "teb_exit_steps": self.teb_exit_steps,
            "recovered": self.recovered,
            "goal_reached": self.goal_reached,
            "safe_steps": sum(m == SAFE for m in self.mode),
        }

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            nr = len(self.r[0]) if self.r else 0
            ns = len(self.s[0]) if self.s else 0
            wr.writerow(["t"] + [f"s{i}" for i in range(ns)] + ["x_p", "y_p"] + [f"r{i}" for i in range(nr)]
                        + ["u0", "u1", "mode", "value", "inside"])
            for k in range(len(self.t)):
                wr.writerow([repr(self.t[k])] + [repr(float(x)) for x in self.s[k]] + [repr(float(x)) for x in self.p[k]]
                            + [repr(float(x)) for x in self.r[k]] + [repr(float(x)) for x in self.u[k]]
                            + [self.mode[k], repr(self.value[k]), int(self.inside[k])])


def rollout(
    scn: Scenario,
    sys: RelativeSystem,
    teb,
    traj: PlanTrajectory,
    s0,
    seed: int,
    duration: float | None = None,
    cfg: HybridConfig | None = None,
) -> SimLog:
    """Closed loop of the hybrid controller against the truth model, following ``traj``.

    The truth noise is drawn once per control period and held across the RK4
    stages. The run stops early on a grid exit (logged as an abort).
    """
    cfg = cfg or scn.control
    rng = np.random.default_rng(seed)
    amp = float(scn.truth["noise_amplitude"])
    dt = cfg.period
    if duration is None:
        duration = traj.horizon * traj.dt + float(scn.sim.get("settle_s", 0.0))
    steps = int(round(duration / dt))
    margin = cfg.margin(teb)
    logr = SimLog(seed)
    s = np.asarray(s0, dtype=float).copy()
    ws = scn.workspace
    angle = 2
    for k in range(steps + 1):
        t = k * dt
        p = traj.at(t)
        if ws.collides(s[:2]):
            logr.collision = True
        try:
            dec = hybrid_step(s, p, teb, cfg, sys)
        except SafetyAbort:
            logr.aborted = True
            break
        inside = dec.value <= teb.vbar + margin
        logr.append(t, s, p, dec.r, dec.input, dec.mode, dec.value)
        logr.inside.append(inside)
        if not inside:
            logr.teb_exit_steps += 1
        if k == steps:
            break
        noise = rng.uniform(-amp, amp, size=2) if amp > 0 else np.zeros(2)
        u = dec.input
        s = integrate(lambda x, uu: truth_derivative(scn, x, uu, noise), s, u, dt, "rk4", angle_index=angle)
    if logr.s:
        i, j = ws.goal[0], ws.goal[1]
        x, y = logr.s[-1][0], logr.s[-1][1]
        logr.goal_reached = bool(i[0] <= x <= j[0] and i[1] <= y <= j[1])
    return logr


@dataclass
class PipelineResult:
    case: str
    observations: list
    uncertainty: object = None
    system: RelativeSystem | None = None
    value: ValueFunction | None = None
    vbar: float | None = None
    teb: object = None
    blocked: np.ndarray | None = None
    plan: PlanTrajectory | None = None
    log: SimLog | None = None
    failure_stage: str | None = None
    failure: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure_stage is None


def start_state(scn: Scenario) -> np.ndarray:
    s = np.zeros(scn.state_dim)
    s[0], s[1] = scn.start
    s[2] = scn.start_heading
    return s


def solve_value(scn: Scenario, sys: RelativeSystem) -> ValueFunction:
    sv = scn.solver
    v = solve_vi(sys, scn.grid, tol=float(sv["tol"]), max_iters=int(sv["max_iters"]), cfl=float(sv["cfl"]),
                 progress_every=int(sv.get("progress_every", 0)))
    if not v.converged:
        raise NumericalError(f"value iteration did not converge in {v.iterations} sweeps (residual {v.residual:.3e})")
    return v


def build_teb(scn: Scenario, sys: RelativeSystem, v: ValueFunction):
    vbar = compute_vbar(v, sys.y_axis, scn.y_range)
    # projections use the same one-cell margin the controller and metrics use
    cfg = scn.control
    slack = float(max(scn.grid.spacing[:2])) if cfg.delta is None else float(cfg.delta)
    return vbar, extract_teb(v, vbar, sys.y_axis, scn.y_range, slack=slack)


def run_pipeline(scn: Scenario, case: str = "gp", observations=None, rollout_seed: int | None = None) -> PipelineResult:
    """Residuals, fit, HJ solve, TEB, augmentation, planning and one closed-loop rollout.

    Infeasibility (TEB or plan) is returned as ``failure_stage`` with the
    partial results, not raised.
    """
    obs = observations if observations is not None else collect_residuals(scn, int(scn.gp.get("n_samples", 60)), scn.seed)
    res = PipelineResult(case, obs)
    res.uncertainty = fit_uncertainty(scn, obs, case)
    res.system = scn.system(res.uncertainty)
    res.value = solve_value(scn, res.system)
    try:
        res.vbar, res.teb = build_teb(scn, res.system, res.value)
    except InfeasibleError as exc:
        res.failure_stage, res.failure = "teb", str(exc)
        return res
    res.blocked = augment_obstacles(scn.workspace, res.teb)
    i, j = scn.workspace.node_index(scn.start)
    if res.blocked[i, j]:
        res.failure_stage, res.failure = "planning", "start position lies in the augmented obstacle set"
        return res
    res.plan = plan_with_growth(scn.workspace, res.blocked, scn.start, scn.planner_dt, scn.horizon_cap, scn.planner_speed)
    if not res.plan.feasible:
        res.failure_stage = "planning"
        res.failure = f"no feasible plan for horizons {[a['horizon'] for a in res.plan.attempts]}"
        return res
    seed = scn.seed if rollout_seed is None else rollout_seed
    res.log = rollout(scn, res.system, res.teb, res.plan, start_state(scn), seed)
    return res


def _member_box(teb, spec: GridSpec, level: float) -> tuple[np.ndarray, np.ndarray]:
    """Bounding box of the grid nodes with ``V <= level``, padded by one cell (full extent on periodic axes)."""
    idx = np.nonzero(teb.value.field.values <= level)
    lo, hi = np.array(spec.lo), np.array(spec.hi)
    for a in range(spec.ndim):
        if spec.periodic[a] or idx[a].size == 0:
            continue
        ax = spec.axis(a)
        h = spec.spacing[a]
        lo[a] = max(ax[idx[a].min()] - h, spec.lo[a])
        hi[a] = min(ax[idx[a].max()] + h, spec.hi[a])
    return lo, hi


def _sample_in_teb(teb, spec: GridSpec, rng, y_range, max_tries: int = 100000) -> np.ndarray:
    """Uniform rejection sample of a grid point with ``V <= vbar`` (global y drawn from ``y_range``)."""
    lo, hi = _member_box(teb, spec, teb.vbar)
    if y_range is not None and teb.y_axis is not None:
        y_lo = max(lo[teb.y_axis], y_range[0])
        y_hi = min(hi[teb.y_axis], y_range[1])
    for _ in range(max_tries):
        r = rng.uniform(lo, hi)
        if y_range is not None and teb.y_axis is not None:
            r[teb.y_axis] = rng.uniform(y_lo, y_hi)
        if teb.value(r) <= teb.vbar:
            return r
    raise InfeasibleError("could not sample an initial relative state inside the TEB")


def _worst_rollout(scn: Scenario, sys: RelativeSystem, teb, r0, steps: int, dt: float, margin: float):
    """Relative-system trajectory under the safe law against vertex-worst planner and disturbance.

    The planner respects the system's y band, as in the solve.
    """
    r = np.asarray(r0, dtype=float).copy()
    spec = teb.value.spec
    vals = []
    psi = 2
    for _ in range(steps):
        try:
            grad = value_gradient(teb.value, r)
        except Exception:
            return vals, True
        u_s = safe_control(teb.value, r, sys)
        u_p, e = worst_case_inputs(r, grad, sys)
        # disturbance is held at the vertex chosen at the start of the period
        r = integrate(lambda x, _u: sys.relative_dynamics(x, u_s, u_p, e), r, None, dt, "rk4", angle_index=psi)
        if not spec.contains(r):
            return vals, True
        vals.append(teb.value(r))
    return vals, False


def containment_study(
    scn: Scenario,
    pipe: PipelineResult,
    trials: int,
    kind: str = "worst",
    seed: int | None = None,
) -> dict:
    """Monte-Carlo TEB containment from random initial states inside the TEB.

    ``kind="worst"`` simulates the relative system under the safe law against
    the vertex-worst planner input and in-band disturbance. ``kind="truth"``
    runs the full hybrid loop against the truth model along the pipeline's plan,
    starting from a random offset inside the TEB.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    if pipe.teb is None:
        raise InfeasibleError("containment study needs a TEB")
    seed = scn.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    teb, sys = pipe.teb, pipe.system
    cfg = scn.control
    margin = cfg.margin(teb)
    dt = cfg.period
    per_trial = []
    inside_steps = total_steps = 0
    if kind == "worst":
        steps = int(round(float(scn.sim["study_horizon_s"]) / dt))
        for n in range(trials):
            r0 = _sample_in_teb(teb, teb.value.spec, rng, scn.y_range)
            vals, exited = _worst_rollout(scn, sys, teb, r0, steps, dt, margin)
            inside = [v <= teb.vbar + margin for v in vals]
            inside_steps += sum(inside)
            total_steps += steps
            per_trial.append({
                "trial": n, "r0": [float(x) for x in r0], "grid_exit": exited,
                "max_value": float(max(vals)) if vals else None,
                "exit_steps": int(steps - sum(inside)),
            })
    elif kind == "truth":
        if pipe.plan is None or not pipe.plan.feasible:
            raise InfeasibleError("truth-mode containment needs a feasible plan")
        p0 = np.asarray(scn.start)
        for n in range(trials):
            r0 = _sample_offset(teb, sys, rng, p0)
            s0 = np.zeros(scn.state_dim)
            s0[0], s0[1] = p0[0] + r0[0], p0[1] + r0[1]
            s0[2:] = r0[2:scn.state_dim]
            lg = rollout(scn, sys, teb, pipe.plan, s0, seed=int(rng.integers(2**31)))
            inside_steps += sum(lg.inside)
            total_steps += len(lg.inside)
            per_trial.append({"trial": n, **lg.summary()})
    else:
        raise ValueError("kind must be 'worst' or 'truth'")
    frac = inside_steps / total_steps if total_steps else 0.0
    out = {
        "kind": kind,
        "trials": trials,
        "seed": seed,
        "margin": margin,
        "vbar": teb.vbar,
        "containment_fraction": frac,
        "grid_exits": sum(bool(t.get("grid_exit") or t.get("aborted")) for t in per_trial),
        "trials_with_exits": sum(1 for t in per_trial if t.get("exit_steps", t.get("teb_exit_steps", 0)) > 0),
        "per_trial": per_trial,
    }
    if kind == "truth":
        out["collisions"] = sum(t["collision"] for t in per_trial)
        out["all_recovered"] = all(t["recovered"] for t in per_trial)
        out["goal_reach_rate"] = sum(t["goal_reached"] for t in per_trial) / trials
    return out


def _sample_offset(teb, sys: RelativeSystem, rng, p0, max_tries: int = 100000) -> np.ndarray:
    """Relative state with ``V <= teb.level`` whose global y matches a tracker placed at ``p0 + (x_r, y_r)``.

    Offsets come from the widened set the obstacle augmentation was built on;
    at the y that attains ``vbar`` the literal set can be a single node.
    """
    spec = teb.value.spec
    lo, hi = _member_box(teb, spec, teb.level)
    for _ in range(max_tries):
        r = rng.uniform(lo, hi)
        if sys.y_axis is not None:
            r[sys.y_axis] = p0[1] + r[1]
        if not spec.contains(r):
            continue
        if teb.value(r) <= teb.level:
            return r
    raise InfeasibleError("could not sample an initial offset inside the TEB")
