"""Command-line entry point: one subcommand per pipeline stage plus the full comparison run.

Every stage reads its inputs from files under ``--out`` and writes its outputs
there, so stages can be re-run and inspected independently::

    <out>/scenario.json
    <out>/gp/observations.json, gp.json, conservative.json
    <out>/<case>/value.field, value.json, residuals.csv, teb.json
    <out>/<case>/blocked.field, plan.csv, plan.json
    <out>/<case>/trials/*.csv, metrics.json
    <out>/teb_comparison.svg, trajectory_<case>.svg, verdict.json
    <out>/manifest.json

``manifest.json`` records content hashes and wall-clock times; it is the only
file that differs between identical runs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DomainError, InfeasibleError, MissingArtifactError, NumericalError, ValidationError
from .gp import Observation, load_uncertainty, save_uncertainty
from .hji import load_value, save_value, teb_to_json
from .planner import PlanTrajectory, augment_obstacles, check_trajectory, plan_with_growth, save_blocked
from .sim import (
    CASES,
    PipelineResult,
    Scenario,
    build_teb,
    collect_residuals,
    containment_study,
    fit_uncertainty,
    rollout,
    solve_value,
    start_state,
)
from .svg import teb_comparison, trajectory_figure

log = logging.getLogger("gpteb")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_INFEASIBLE = 4
EXIT_NUMERICAL = 5

COMPARISON_YS = (0.0, 0.6)


class Run:
    """Run directory plus the manifest being accumulated for this command."""

    def __init__(self, out, scenario_path):
        self.root = Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.scenario_path = str(scenario_path) if scenario_path else "<packaged sim1>"
        self.stages = []

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        if not p.exists():
            raise MissingArtifactError(f"missing upstream artifact {p}")
        return p

    def stage(self, name: str, t0: float, files) -> None:
        self.stages.append({
            "stage": name,
            "wall_s": round(time.perf_counter() - t0, 3),
            "outputs": {str(Path(f).relative_to(self.root)): _sha256(f) for f in files},
        })

    def write_manifest(self) -> None:
        path = self.root / "manifest.json"
        old = []
        if path.exists():
            try:
                old = json.loads(path.read_text(encoding="utf-8")).get("stages", [])
            except (json.JSONDecodeError, OSError):
                old = []
        names = {s["stage"] for s in self.stages}
        stages = [s for s in old if s.get("stage") not in names] + self.stages
        doc = {"tool": "gpteb", "version": __version__, "scenario": self.scenario_path, "stages": stages}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def packaged_scenario(name: str = "sim1") -> dict:
    with resources.files("gpteb").joinpath("scenarios", f"{name}.json").open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _scaled_grid(g: dict, scale: float) -> dict:
    g = dict(g)
    periodic = g.get("periodic")
    n = []
    for k, cnt in enumerate(g["n"]):
        per = bool(periodic[k]) if periodic else False
        n.append(max(2, int(round(cnt * scale))) if per else max(2, int(round((cnt - 1) * scale)) + 1))
    g["n"] = n
    return g


def load_scenario(args) -> Scenario:
    """Scenario from ``--scenario`` (or the packaged one) with command-line overrides applied."""
    if args.scenario:
        try:
            d = json.loads(Path(args.scenario).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ValidationError(f"scenario file {args.scenario} not found") from exc
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{args.scenario}: not valid JSON ({exc})") from exc
    else:
        d = packaged_scenario()
    if not isinstance(d, dict):
        raise ValidationError("scenario must be a JSON object")
    if args.seed is not None:
        d["seed"] = int(args.seed)
    if getattr(args, "grid_scale", None) is not None:
        if not args.grid_scale > 0:
            raise ValidationError("--grid-scale must be positive")
        if "grid" not in d:
            raise ValidationError("scenario.grid is required")
        d["grid"] = _scaled_grid(d["grid"], args.grid_scale)
    gp = dict(d.get("gp", {}))
    if getattr(args, "p", None) is not None:
        gp["p"], gp["sigma_mult"] = args.p, None
    if getattr(args, "sigma_mult", None) is not None:
        gp["sigma_mult"], gp["p"] = args.sigma_mult, None
    if gp:
        d["gp"] = gp
    if getattr(args, "trials", None) is not None:
        if args.trials < 1:
            raise ValidationError("--trials must be at least 1")
        d.setdefault("sim", {})["trials"] = int(args.trials)
    return Scenario.from_dict(d)


# stages ---------------------------------------------------------------------


def stage_scenario(run: Run, scn: Scenario) -> None:
    t0 = time.perf_counter()
    p = run.path("scenario.json")
    _dump(p, scn.to_json())
    run.stage("scenario", t0, [p])


def stage_fit(run: Run, scn: Scenario) -> dict:
    t0 = time.perf_counter()
    obs = collect_residuals(scn, int(scn.gp.get("n_samples", 60)), scn.seed)
    p_obs = run.path("gp", "observations.json")
    _dump(p_obs, [{"state": list(o.state), "target": o.target, "component": o.component} for o in obs])
    models = {}
    files = [p_obs]
    for case in CASES:
        models[case] = fit_uncertainty(scn, obs, case)
        p = run.path("gp", f"{case}.json")
        save_uncertainty(models[case], p)
        files.append(p)
    run.stage("fit-gp", t0, files)
    return models


def _load_models(run: Run, case: str):
    return load_uncertainty(run.need("gp", f"{case}.json"))


def load_observations(run: Run) -> list[Observation]:
    with open(run.need("gp", "observations.json"), encoding="utf-8") as fh:
        raw = json.load(fh)
    return [Observation(np.asarray(o["state"]), float(o["target"]), int(o["component"])) for o in raw]


def stage_solve(run: Run, scn: Scenario, case: str, unc=None) -> PipelineResult:
    t0 = time.perf_counter()
    unc = unc if unc is not None else _load_models(run, case)
    res = PipelineResult(case, [], unc, scn.system(unc))
    res.value = solve_value(scn, res.system)
    files = [run.path("cases", case, "value.field"), run.path("cases", case, "value.json"), run.path("cases", case, "residuals.csv")]
    save_value(res.value, *files)
    try:
        res.vbar, res.teb = build_teb(scn, res.system, res.value)
    except InfeasibleError as exc:
        res.failure_stage, res.failure = "teb", str(exc)
    p = run.path("cases", case, "teb.json")
    doc = {"case": case, "feasible": res.teb is not None, "failure": res.failure}
    if res.teb is not None:
        doc.update(teb_to_json(res.teb, COMPARISON_YS))
    _dump(p, doc)
    files.append(p)
    run.stage(f"solve-hji:{case}", t0, files)
    return res


def _load_solved(run: Run, scn: Scenario, case: str) -> PipelineResult:
    unc = _load_models(run, case)
    res = PipelineResult(case, [], unc, scn.system(unc))
    res.value = load_value(run.need("cases", case, "value.field"), run.need("cases", case, "value.json"), run.need("cases", case, "residuals.csv"))
    if res.value.spec.n != scn.grid.n:
        raise ValidationError(f"{case}/value.field grid {res.value.spec.n} differs from the scenario grid {scn.grid.n}")
    res.vbar, res.teb = build_teb(scn, res.system, res.value)
    return res


def stage_plan(run: Run, scn: Scenario, res: PipelineResult) -> PipelineResult:
    t0 = time.perf_counter()
    case = res.case
    w = scn.workspace
    res.blocked = augment_obstacles(w, res.teb)
    files = [run.path("cases", case, "blocked.field")]
    save_blocked(w, res.blocked, files[0])
    i, j = w.node_index(scn.start)
    if res.blocked[i, j]:
        res.plan = PlanTrajectory(scn.planner_dt, np.zeros((0, 2)), np.zeros((0, 2)), False, 0)
        res.failure_stage, res.failure = "planning", "start position lies in the augmented obstacle set"
    else:
        res.plan = plan_with_growth(w, res.blocked, scn.start, scn.planner_dt, scn.horizon_cap, scn.planner_speed)
        if not res.plan.feasible:
            res.failure_stage = "planning"
            res.failure = f"no feasible plan for horizons {[a['horizon'] for a in res.plan.attempts]}"
        else:
            bad = check_trajectory(w, res.blocked, res.plan, scn.planner_speed)
            if bad:
                raise NumericalError(f"planner returned an invalid trajectory: {bad[:3]}")
    p_json = run.path("cases", case, "plan.json")
    doc = res.plan.to_json()
    doc["failure"] = res.failure
    _dump(p_json, doc)
    files.append(p_json)
    if res.plan.feasible:
        p_csv = run.path("cases", case, "plan.csv")
        res.plan.to_csv(p_csv)
        files.append(p_csv)
    run.stage(f"plan:{case}", t0, files)
    return res


def _load_plan(run: Run, case: str) -> PlanTrajectory:
    with open(run.need("cases", case, "plan.json"), encoding="utf-8") as fh:
        return PlanTrajectory.from_json(json.load(fh))


def _log_metrics(lg, teb, margin) -> dict:
    inside = lg.inside
    return {
        **lg.summary(),
        "containment_fraction": (sum(inside) / len(inside)) if inside else 0.0,
        "margin": margin,
        "vbar": teb.vbar,
        "max_value": max(lg.value) if lg.value else None,
    }


def stage_simulate(run: Run, scn: Scenario, res: PipelineResult) -> dict:
    t0 = time.perf_counter()
    case = res.case
    if res.plan is None or not res.plan.feasible:
        raise InfeasibleError(f"{case}: no feasible plan to follow")
    res.log = rollout(scn, res.system, res.teb, res.plan, start_state(scn), scn.seed)
    p_csv = run.path("cases", case, "trials", "rollout.csv")
    res.log.to_csv(p_csv)
    metrics = _read_metrics(run, case)
    metrics["rollout"] = _log_metrics(res.log, res.teb, scn.control.margin(res.teb))
    metrics["rollout"]["plan_duration_s"] = res.plan.duration
    p = run.path("cases", case, "metrics.json")
    _dump(p, metrics)
    run.stage(f"simulate:{case}", t0, [p_csv, p])
    return metrics


def _read_metrics(run: Run, case: str) -> dict:
    p = run.root / "cases" / case / "metrics.json"
    if p.exists():
        return json.loads(p.read_text(encoding="utf-8"))
    return {"case": case}


def _per_trial_csv(path, rows) -> None:
    keys = [k for k in rows[0] if not isinstance(rows[0][k], (list, dict))] if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(keys)
        for r in rows:
            wr.writerow([repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys])


def stage_study(run: Run, scn: Scenario, res: PipelineResult, trials: int) -> dict:
    t0 = time.perf_counter()
    case = res.case
    files = []
    metrics = _read_metrics(run, case)
    for kind in ("worst", "truth"):
        if kind == "truth" and (res.plan is None or not res.plan.feasible):
            continue
        m = containment_study(scn, res, trials, kind=kind, seed=scn.seed)
        p = run.path("cases", case, "trials", f"study_{kind}.csv")
        _per_trial_csv(p, m.pop("per_trial"))
        files.append(p)
        metrics[f"study_{kind}"] = m
    p = run.path("cases", case, "metrics.json")
    _dump(p, metrics)
    files.append(p)
    run.stage(f"study:{case}", t0, files)
    return metrics


def reproduce(run: Run, scn: Scenario) -> dict:
    """Both cases end to end, the comparison figures and the feasibility verdict."""
    stage_scenario(run, scn)
    models = stage_fit(run, scn)
    results = {}
    for case in CASES:
        res = stage_solve(run, scn, case, models[case])
        if res.teb is not None:
            stage_plan(run, scn, res)
            if res.plan.feasible:
                stage_simulate(run, scn, res)
        results[case] = res
    t0 = time.perf_counter()
    files = []
    tebs = {c: r.teb for c, r in results.items() if r.teb is not None}
    if tebs:
        p = run.path("teb_comparison.svg")
        p.write_text(teb_comparison(tebs, COMPARISON_YS), encoding="utf-8")
        files.append(p)
    for case, res in results.items():
        p = run.path(f"trajectory_{case}.svg")
        status = "feasible" if res.plan is not None and res.plan.feasible else "infeasible"
        p.write_text(trajectory_figure(scn.workspace, res.blocked, res.plan if status == "feasible" else None,
                                       res.log, title=f"{case}: {status}"), encoding="utf-8")
        files.append(p)
    verdict = {}
    for case, res in results.items():
        v = {
            "status": "feasible" if res.ok else "infeasible",
            "failure_stage": res.failure_stage,
            "failure": res.failure,
            "vbar": res.vbar,
            "area_m2": {f"{y:g}": res.teb.area(y) for y in COMPARISON_YS} if res.teb is not None else None,
        }
        if res.plan is not None:
            v["attempted_horizons"] = [a["horizon"] for a in res.plan.attempts]
        if res.ok:
            v["plan_duration_s"] = res.plan.duration
            v["rollout_collision"] = res.log.collision
            v["rollout_teb_exit_steps"] = res.log.teb_exit_steps
        verdict[case] = v
    p = run.path("verdict.json")
    _dump(p, verdict)
    files.append(p)
    run.stage("reproduce-sim1", t0, files)
    return verdict


# command dispatch -----------------------------------------------------------


def _cmd_fit(args, run, scn):
    stage_scenario(run, scn)
    stage_fit(run, scn)
    return EXIT_OK


def _cmd_solve(args, run, scn):
    stage_scenario(run, scn)
    res = stage_solve(run, scn, args.case)
    return EXIT_OK if res.teb is not None else EXIT_INFEASIBLE


def _cmd_plan(args, run, scn):
    res = _load_solved(run, scn, args.case)
    stage_plan(run, scn, res)
    return EXIT_OK if res.plan.feasible else EXIT_INFEASIBLE


def _cmd_simulate(args, run, scn):
    res = _load_solved(run, scn, args.case)
    res.plan = _load_plan(run, args.case)
    if not res.plan.feasible:
        return EXIT_INFEASIBLE
    stage_simulate(run, scn, res)
    return EXIT_OK


def _cmd_study(args, run, scn):
    res = _load_solved(run, scn, args.case)
    p = run.root / "cases" / args.case / "plan.json"
    if p.exists():
        res.plan = _load_plan(run, args.case)
    stage_study(run, scn, res, int(scn.sim["trials"]))
    return EXIT_OK


def _cmd_reproduce(args, run, scn):
    reproduce(run, scn)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gpteb", description="GP-informed tracking error bounds: fit, solve, plan, simulate.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, case=True):
        p.add_argument("--scenario", help="scenario JSON (default: the packaged sim1 scenario)")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--grid-scale", type=float, help="scale value-grid point counts by this factor")
        g = p.add_mutually_exclusive_group()
        g.add_argument("--p", type=float, help="confidence level of the uncertainty band")
        g.add_argument("--sigma-mult", type=float, help="band half-width in posterior standard deviations")
        p.add_argument("--trials", type=int, help="Monte-Carlo trial count")
        p.add_argument("-v", "--verbose", action="store_true")
        if case:
            p.add_argument("--case", choices=CASES, default="gp", help="uncertainty model to use")

    for name, fn, has_case, help_ in (
        ("fit-gp", _cmd_fit, False, "collect residuals and fit the GP and conservative models"),
        ("solve-hji", _cmd_solve, True, "solve the value function and extract the TEB"),
        ("plan", _cmd_plan, True, "augment obstacles and plan"),
        ("simulate", _cmd_simulate, True, "closed-loop rollout along the plan"),
        ("study", _cmd_study, True, "Monte-Carlo TEB containment studies"),
        ("reproduce-sim1", _cmd_reproduce, False, "both cases end to end, figures and verdict"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p, has_case)
        p.set_defaults(func=fn)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        scn = load_scenario(args)
        run = Run(args.out, args.scenario)
        try:
            code = args.func(args, run, scn)
        finally:
            if run.stages:
                run.write_manifest()
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InfeasibleError, DomainError) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return code


if __name__ == "__main__":
    sys.exit(main())
