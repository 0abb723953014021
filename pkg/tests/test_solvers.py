import json
import math

import pytest

from baseseq.cost import nav_time, plan_cost
from baseseq.exceptions import InstanceTooLarge
from baseseq.reach import DEFAULT_MODEL, CandidateSet, build_irms
from baseseq.solvers import (
    FeasibilityMode,
    Plan,
    Stop,
    brute_force,
    execute_plan,
    greedy_set_cover,
    plan_from_dict,
    plan_to_dict,
    save_plan,
    solve_dp,
    solve_mbp,
    solve_pbg,
)
from baseseq.world import ObjectState, Pose2, sample_scene

GC, IK = FeasibilityMode.GRASP_CHECKED, FeasibilityMode.IK_ONLY


def _scene_irms(seed, n):
    scene = sample_scene(seed, n)
    return scene, build_irms(DEFAULT_MODEL, scene)


def _pbg_oracle(scene, irms, gc=True):
    """Independent restatement of the nearest-object greedy rule."""
    pose, left, out = scene.robot_start, {o.id for o in scene.objects}, []
    feas = {oid: [c for c in cs.candidates if (c.traj_ok if gc else c.ik_ok)] for oid, cs in irms.items()}
    left = {oid for oid in left if feas[oid]}
    while left:
        dists = sorted((math.dist((pose.x, pose.y), (scene.object_by_id(o).pose.x, scene.object_by_id(o).pose.y)), o)
                       for o in left)
        oid = dists[0][1]
        times = [nav_time(pose, c.base) for c in feas[oid]]
        best = feas[oid][times.index(min(times))]
        out.append((best.base, (oid,)))
        pose = best.base
        left.remove(oid)
    return out


def test_pbg_matches_oracle():
    for seed in range(8):
        scene, irms = _scene_irms(seed, 5)
        for gc in (True, False):
            plan = solve_pbg(scene, irms, GC if gc else IK)
            assert [(s.base, s.object_ids) for s in plan.stops] == _pbg_oracle(scene, irms, gc)


def test_pbg_single_object_and_tie():
    scene, irms = _scene_irms(3, 1)
    plan = solve_pbg(scene, irms, GC)
    feas = irms[0].feasible(True)
    assert nav_time(scene.robot_start, plan.stops[0].base) == min(nav_time(scene.robot_start, c.base) for c in feas)
    # mirror two objects about the x axis with the robot on the axis: equidistant, id 0 first
    base = sample_scene(3, 1)
    objs = (ObjectState(0, 0, Pose2(0.2, 0.2, 0)), ObjectState(1, 0, Pose2(0.2, -0.2, 0)))
    sym = base.with_objects(objs).with_robot(Pose2(2.8, 0.0, math.pi))
    plan = solve_pbg(sym, build_irms(DEFAULT_MODEL, sym), GC)
    assert plan.object_order[0] == 0


def _cover_oracle(sets):
    uncovered = {o for o, c in sets.items() if c}
    poses = {}
    for o, cands in sets.items():
        for c in cands:
            poses.setdefault(c.base, {})[o] = c.grasp_time
    out = []
    while uncovered:
        ranked = sorted(
            ((-len(uncovered & set(t)), sum(t[o] for o in sorted(uncovered & set(t))), (b.x, b.y, b.theta), b)
             for b, t in poses.items() if uncovered & set(t)),
            key=lambda r: r[:3],
        )
        b = ranked[0][3]
        new = tuple(sorted(uncovered & set(poses[b])))
        out.append((b, new))
        uncovered -= set(new)
    return out


def test_set_cover_matches_oracle():
    for seed in range(6):
        scene, irms = _scene_irms(seed, 6)
        sets = {oid: cs.feasible(True) for oid, cs in sorted(irms.items())}
        assert greedy_set_cover(sets) == _cover_oracle(sets)


def test_mbp_examples():
    base = sample_scene(0, 1)
    close = base.with_objects([ObjectState(i, 0, Pose2(0.6 + 0.16 * i, 0.3, 0)) for i in range(2)])
    assert len(solve_mbp(close, build_irms(DEFAULT_MODEL, close), GC).stops) == 1
    apart = base.with_objects([ObjectState(0, 0, Pose2(-0.9, 0, 0)), ObjectState(1, 0, Pose2(0.9, 0, 0))])
    assert len(solve_mbp(apart, build_irms(DEFAULT_MODEL, apart), GC).stops) >= 2


def test_mbp_never_more_stops_than_pbg():
    for seed in range(10):
        scene, irms = _scene_irms(seed, 6)
        for mode in (GC, IK):
            assert len(solve_mbp(scene, irms, mode).stops) <= len(solve_pbg(scene, irms, mode).stops)


def test_dp_equals_brute_force():
    for seed in range(12):
        scene, irms = _scene_irms(100 + seed, 1 + seed % 4)
        dp = solve_dp(scene, irms, top_k=6, seed_heuristics=False)
        bf = brute_force(scene, irms, cap_candidates=6)
        assert dp.predicted_cost.total == pytest.approx(bf.predicted_cost.total, abs=1e-9)


def test_dp_single_object_is_argmin():
    scene, irms = _scene_irms(9, 1)
    dp = solve_dp(scene, irms, top_k=None)
    best = min(nav_time(scene.robot_start, c.base) + c.grasp_time for c in irms[0].feasible(True))
    assert dp.predicted_cost.total == pytest.approx(best, abs=1e-12)


def test_dp_dominates_greedy():
    for seed in range(6):
        scene, irms = _scene_irms(200 + seed, 4)
        dp = solve_dp(scene, irms, top_k=None).predicted_cost.total
        assert dp <= solve_pbg(scene, irms, GC).predicted_cost.total + 1e-9
        assert dp <= solve_mbp(scene, irms, GC).predicted_cost.total + 1e-9


def test_brute_force_relabeling():
    scene, irms = _scene_irms(31, 3)
    relabeled = scene.with_objects([ObjectState(2 - o.id, o.class_id, o.pose) for o in scene.objects])
    a = brute_force(scene, irms, 4)
    b = brute_force(relabeled, build_irms(DEFAULT_MODEL, relabeled), 4)
    assert a.predicted_cost.total == pytest.approx(b.predicted_cost.total, abs=1e-12)
    assert [2 - o for o in a.object_order] == b.object_order


def test_guards():
    scene, irms = _scene_irms(1, 5)
    with pytest.raises(InstanceTooLarge):
        brute_force(scene, irms)
    big = sample_scene(1, 10)
    objs = list(big.objects) + [ObjectState(10 + i, 0, Pose2(0, 0, 0)) for i in range(3)]
    with pytest.raises(InstanceTooLarge):
        solve_dp(big.with_objects(objs), {})


def test_planners_deterministic_and_latency():
    scene, irms = _scene_irms(8, 5)
    for solver in (solve_pbg, solve_mbp):
        a, b = solver(scene, irms, GC), solver(scene, irms, GC)
        assert a.stops == b.stops
    p = solve_pbg(scene, irms, GC, latency=0.01)
    assert p.feasibility_checks == sum(len(cs) for cs in irms.values())
    assert p.planning_wall_time >= 0.01 * p.feasibility_checks
    assert solve_pbg(scene, irms, IK, latency=0.01).feasibility_checks == 0
    d1, d2 = solve_dp(scene, irms), solve_dp(scene, irms)
    assert d1.stops == d2.stops


def test_skipped_objects_reported():
    scene, irms = _scene_irms(2, 3)
    irms = dict(irms)
    irms[1] = CandidateSet(1, ())
    for plan in (solve_pbg(scene, irms, GC), solve_mbp(scene, irms, GC), solve_dp(scene, irms)):
        assert 1 in plan.skipped and 1 not in plan.object_order


def test_execute_plan_examples():
    scene, irms = _scene_irms(12, 5)
    dp = solve_dp(scene, irms)
    rep = execute_plan(scene, dp)
    assert rep.objects_grasped == 5 and all(rep.success.values())
    assert rep.cost.nav_time == pytest.approx(dp.predicted_cost.nav_time, abs=1e-12)
    assert rep.cost.grasp_time == pytest.approx(dp.predicted_cost.grasp_time, abs=1e-12)
    bad = next(c for c in irms[0].candidates if c.ik_ok and not c.traj_ok)
    rep = execute_plan(scene, Plan([Stop(bad.base, (0,))]))
    assert not rep.success[0] and rep.cost.grasp_time == 0.0
    rep = execute_plan(scene, Plan([Stop(Pose2(0, 0, 0), (0, 1))]))
    assert rep.objects_grasped == 0 and rep.cost.nav_time > 0


def test_plan_serialization(tmp_path):
    scene, irms = _scene_irms(5, 4)
    plan = solve_mbp(scene, irms, GC)
    path = tmp_path / "p.json"
    save_plan(plan, path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"planner", "stops", "predicted", "wall_time"}
    back = plan_from_dict(doc)
    assert back.stops == [Stop(s.base, tuple(s.object_ids)) for s in plan.stops]
    assert plan_cost(scene, back, DEFAULT_MODEL).total == pytest.approx(doc["predicted"]["total"], abs=1e-12)
    assert plan_to_dict(back)["stops"] == doc["stops"]
