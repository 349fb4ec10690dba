import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gpteb.errors import DomainError
from gpteb.grid import GridSpec, ScalarField, load_field
from gpteb.hji import ValueFunction, extract_teb
from gpteb.planner import (
    PlanTrajectory,
    Workspace,
    augment_obstacles,
    check_trajectory,
    plan,
    plan_with_growth,
    save_blocked,
)


def small_ws(obstacles=(), goal=((0.4, 0.0), (0.5, 0.1)), ref=(0.45, 0.05), res=0.1, foot=0.0):
    return Workspace((0.0, 0.0), (0.5, 0.3), res, list(obstacles), goal, ref, foot)


def disk_teb(radius, h=0.1, n=9):
    lim = h * (n - 1) / 2
    spec = GridSpec((-lim, -lim, -1.0), (lim, lim, 1.0), (n, n, 3))
    v = ValueFunction(ScalarField.from_function(spec, lambda x, y, z: np.hypot(x, y) + 0 * z), True, 0, 0.0, {})
    return extract_teb(v, radius, 2, (-1.0, 1.0))


def test_workspace_validation():
    with pytest.raises(ValueError):
        Workspace((0, 0), (0.55, 0.3), 0.1, [], ((0.4, 0), (0.5, 0.1)), (0.45, 0.05))
    with pytest.raises(ValueError):
        small_ws(ref=(0.1, 0.1))
    with pytest.raises(ValueError):
        small_ws(obstacles=[((0.4, 0.0), (0.5, 0.0))])
    with pytest.raises(ValueError):
        small_ws(obstacles=[((0.3, 0.2), (0.2, 0.1))])


def test_footprint_mask_and_collision():
    w = small_ws(obstacles=[((0.2, 0.1), (0.2, 0.1))], foot=0.1)
    i, j = w.node_index((0.2, 0.1))
    assert w.obstacle_mask[i, j]
    # cells within footprint + half a cell are covered, far ones are not
    assert w.obstacle_mask[i + 1, j] and w.obstacle_mask[i - 1, j + 1]
    assert not w.obstacle_mask[i + 2, j + 2]
    assert w.collides((0.25, 0.1)) and not w.collides((0.35, 0.1))
    with pytest.raises(DomainError):
        w.node_index((0.23, 0.1))


def brute_augment(w, teb, h):
    """p is blocked iff p + b lands within one (res + h)/2 box of an obstacle node for a member b."""
    xs, ys = w.nodes()
    out = w.obstacle_mask.copy()
    offs = teb.offsets(0.0)
    ox, oy = np.nonzero(w.obstacle_mask)
    half = 0.5 * (w.res + h) + 1e-9
    for i, x in enumerate(xs):
        for j, y in enumerate(ys):
            for bx, by in offs:
                if np.any((np.abs(x + bx - xs[ox]) <= half) & (np.abs(y + by - ys[oy]) <= half)):
                    out[i, j] = True
                    break
    return out


@pytest.mark.parametrize("radius", [0.0, 0.1, 0.25])
def test_augmentation_matches_brute_force(radius):
    w = Workspace((0.0, -0.5), (1.0, 0.5), 0.05, [((0.4, -0.1), (0.5, 0.05))], ((0.9, -0.1), (1.0, 0.1)), (0.95, 0.0))
    teb = disk_teb(radius)
    got = augment_obstacles(w, teb)
    assert np.array_equal(got, brute_augment(w, teb, 0.1))


def test_augmentation_monotone_in_teb():
    w = Workspace((0.0, -0.5), (1.0, 0.5), 0.05, [((0.4, -0.1), (0.5, 0.05))], ((0.9, -0.1), (1.0, 0.1)), (0.95, 0.0))
    masks = [augment_obstacles(w, disk_teb(r)) for r in (0.0, 0.15, 0.3)]
    assert np.all(masks[0] >= w.obstacle_mask)
    assert np.all(masks[1] >= masks[0]) and np.all(masks[2] >= masks[1])
    assert masks[2].sum() > masks[0].sum()


def brute_plan(w, blocked, p0, T, step):
    """Exhaustive search over all lattice move sequences."""
    xs, ys = w.nodes()
    moves = [(a, b) for a in range(-step, step + 1) for b in range(-step, step + 1)]
    best = math.inf
    start = w.node_index(p0)
    nx, ny = blocked.shape

    def ok(a, b):
        (i0, j0), (i1, j1) = a, b
        return all(not blocked[i, j] for i in range(min(i0, i1), max(i0, i1) + 1) for j in range(min(j0, j1), max(j0, j1) + 1))

    for seq in itertools.product(moves, repeat=T):
        path = [start]
        good = True
        for dx, dy in seq:
            nxt = (path[-1][0] + dx, path[-1][1] + dy)
            if not (0 <= nxt[0] < nx and 0 <= nxt[1] < ny) or not ok(path[-1], nxt):
                good = False
                break
            path.append(nxt)
        if not good or not w.goal_mask[path[-1]]:
            continue
        c = sum((xs[i] - w.reference[0]) ** 2 + (ys[j] - w.reference[1]) ** 2 for i, j in path)
        best = min(best, c)
    return best


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), T=st.integers(1, 3))
def test_plan_is_optimal(seed, T):
    rng = np.random.default_rng(seed)
    w = small_ws()
    blocked = rng.random(w.lattice.shape) < 0.2
    blocked[0, 0] = False
    ref = brute_plan(w, blocked, (0.0, 0.0), T, 2)
    res = plan(w, blocked, (0.0, 0.0), 1.0, T, 0.2)
    if math.isinf(ref):
        assert not res.feasible
    else:
        assert res.feasible and res.cost == pytest.approx(ref)
        assert check_trajectory(w, blocked, res, 0.2) == []


def test_plan_with_growth_and_infeasible():
    w = Workspace((0.0, 0.0), (1.0, 0.5), 0.05, [((0.5, 0.0), (0.55, 0.5))], ((0.9, 0.2), (1.0, 0.3)), (0.95, 0.25))
    blocked = augment_obstacles(w, disk_teb(0.0))
    res = plan_with_growth(w, blocked, (0.0, 0.25), 0.5, 40, 0.1)
    assert not res.feasible
    assert [a["horizon"] for a in res.attempts] == [1, 2, 4, 8, 16, 32, 40]
    assert check_trajectory(w, blocked, res, 0.1) == ["trajectory is flagged infeasible"]
    open_ws = Workspace((0.0, 0.0), (1.0, 0.5), 0.05, [], ((0.9, 0.2), (1.0, 0.3)), (0.95, 0.25))
    ok = plan_with_growth(open_ws, open_ws.obstacle_mask, (0.0, 0.25), 0.5, 40, 0.1)
    assert ok.feasible and ok.horizon == 32
    # the straight run needs 18 steps of 0.05 m
    assert ok.arrival_step == 18 and ok.duration == pytest.approx(9.0)
    assert check_trajectory(open_ws, open_ws.obstacle_mask, ok, 0.1) == []


def test_plan_rejects_blocked_start():
    w = small_ws(obstacles=[((0.0, 0.0), (0.0, 0.0))])
    with pytest.raises(DomainError):
        plan(w, w.obstacle_mask, (0.0, 0.0), 1.0, 2, 0.2)


def test_check_trajectory_detects_tampering():
    w = Workspace((0.0, 0.0), (1.0, 0.5), 0.05, [], ((0.9, 0.2), (1.0, 0.3)), (0.95, 0.25))
    tr = plan(w, w.obstacle_mask, (0.0, 0.25), 0.5, 20, 0.1)
    bad = PlanTrajectory(tr.dt, tr.points.copy(), tr.inputs * 3, True, tr.horizon)
    msgs = check_trajectory(w, w.obstacle_mask, bad, 0.1)
    assert any("speed box" in m for m in msgs) and any("Euler" in m for m in msgs)


def test_trajectory_sampling_and_json(tmp_path):
    w = Workspace((0.0, 0.0), (1.0, 0.5), 0.05, [], ((0.9, 0.2), (1.0, 0.3)), (0.95, 0.25))
    tr = plan(w, w.obstacle_mask, (0.0, 0.25), 0.5, 20, 0.1)
    assert tr.at(0.25) == pytest.approx(tr.points[0] + 0.25 * tr.inputs[0])
    assert tr.at(100.0) == pytest.approx(tr.points[-1])
    assert tr.input_at(100.0) == pytest.approx([0.0, 0.0])
    back = PlanTrajectory.from_json(tr.to_json())
    assert np.array_equal(back.points, tr.points) and back.arrival_step == tr.arrival_step
    save_blocked(w, w.obstacle_mask, tmp_path / "b.field")
    assert load_field(tmp_path / "b.field").values.sum() == 0
    tr.to_csv(tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "k,t,x_p,y_p,u_px,u_py"
