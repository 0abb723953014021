"""Classical base-pose sequence planners and plan execution.

All planners work on the shared candidate lattice produced by
:func:`baseseq.reach.build_irms`. ``latency`` emulates an expensive
simulator-backed trajectory check: every candidate validated in grasp-checked
mode adds ``latency`` seconds to the reported planning time (no sleeping).
"""

from __future__ import annotations

import enum
import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cost import CostBreakdown, nav_time, plan_cost
from .exceptions import InstanceTooLarge, InvalidPlan
from .reach import DEFAULT_MODEL, Candidate, ManipulatorModel, footprint_collides, grasp_time, trajectory_feasible
from .world import Pose2

DP_MAX_OBJECTS = 12
BRUTE_MAX_OBJECTS = 4
BRUTE_MAX_CANDIDATES = 6


class FeasibilityMode(enum.Enum):
    IK_ONLY = "ik_only"
    GRASP_CHECKED = "grasp_checked"


@dataclass(frozen=True)
class Stop:
    base: Pose2
    object_ids: tuple[int, ...]


@dataclass
class Plan:
    stops: list[Stop]
    predicted_cost: CostBreakdown = field(default_factory=CostBreakdown)
    planner_name: str = ""
    planning_wall_time: float = 0.0
    skipped: tuple[int, ...] = ()
    feasibility_checks: int = 0

    @property
    def object_order(self) -> list[int]:
        return [oid for stop in self.stops for oid in stop.object_ids]


@dataclass
class ExecutionReport:
    success: dict[int, bool]
    cost: CostBreakdown
    objects_grasped: int


def validate_plan(scene, plan: Plan) -> None:
    known = {o.id for o in scene.objects}
    seen = set()
    for oid in plan.object_order:
        if oid not in known:
            raise InvalidPlan(f"unknown object id {oid}")
        if oid in seen:
            raise InvalidPlan(f"object {oid} grasped twice")
        seen.add(oid)


def _feasible(irms, mode: FeasibilityMode) -> tuple[dict[int, list[Candidate]], int]:
    """Mode-feasible candidates per object and the number of trajectory checks spent."""
    gc = mode is FeasibilityMode.GRASP_CHECKED
    sets = {oid: cs.feasible(gc) for oid, cs in sorted(irms.items())}
    checks = sum(len(cs) for cs in irms.values()) if gc else 0
    return sets, checks


def _finish(scene, stops, name, t0, checks, latency, skipped, model) -> Plan:
    wall = time.perf_counter() - t0 + latency * checks
    plan = Plan(stops, CostBreakdown(), name, wall, tuple(skipped), checks)
    plan.predicted_cost = plan_cost(scene, plan, model)
    return plan


def _lattice_key(pose: Pose2) -> tuple[float, float, float]:
    return (pose.x, pose.y, pose.theta)


def solve_pbg(scene, irms, mode: FeasibilityMode = FeasibilityMode.GRASP_CHECKED,
              latency: float = 0.0, model: ManipulatorModel = DEFAULT_MODEL) -> Plan:
    """Proximity-based greedy: nearest object next, cheapest-to-reach pose for it."""
    t0 = time.perf_counter()
    sets, checks = _feasible(irms, mode)
    skipped = [oid for oid, c in sets.items() if not c]
    remaining = sorted(oid for oid, c in sets.items() if c)
    pose = scene.robot_start
    stops = []
    while remaining:
        oid = min(remaining, key=lambda i: (pose.distance(scene.object_by_id(i).pose), i))
        best, best_t = None, np.inf
        for cand in sets[oid]:
            t = nav_time(pose, cand.base)
            if t < best_t:
                best, best_t = cand, t
        stops.append(Stop(best.base, (oid,)))
        pose = best.base
        remaining.remove(oid)
    name = "PBG-GC" if mode is FeasibilityMode.GRASP_CHECKED else "PBG"
    return _finish(scene, stops, name, t0, checks, latency, skipped, model)


def greedy_set_cover(sets: dict[int, list[Candidate]]) -> list[tuple[Pose2, tuple[int, ...]]]:
    """Greedy cover of objects by lattice poses.

    Picks the pose covering most uncovered objects; ties go to the smaller
    summed grasp time over the newly covered objects, then lattice order.
    """
    cover: dict[tuple, tuple[Pose2, dict[int, float]]] = {}
    for oid, cands in sets.items():
        for c in cands:
            key = _lattice_key(c.base)
            cover.setdefault(key, (c.base, {}))[1][oid] = c.grasp_time
    uncovered = {oid for oid, c in sets.items() if c}
    chosen = []
    while uncovered:
        best_key, best_rank = None, None
        for key, (_, times) in cover.items():
            new = uncovered.intersection(times)
            if not new:
                continue
            rank = (-len(new), sum(times[o] for o in sorted(new)), key)
            if best_rank is None or rank < best_rank:
                best_key, best_rank = key, rank
        base, times = cover[best_key]
        new = tuple(sorted(uncovered.intersection(times)))
        chosen.append((base, new))
        uncovered.difference_update(new)
    return chosen


def solve_mbp(scene, irms, mode: FeasibilityMode = FeasibilityMode.GRASP_CHECKED,
              latency: float = 0.0, model: ManipulatorModel = DEFAULT_MODEL) -> Plan:
    """Minimum base poses: greedy set cover, then nearest-next ordering of the stops."""
    t0 = time.perf_counter()
    sets, checks = _feasible(irms, mode)
    skipped = [oid for oid, c in sets.items() if not c]
    pending = greedy_set_cover(sets)
    pose = scene.robot_start
    stops = []
    while pending:
        nxt = min(pending, key=lambda p: (nav_time(pose, p[0]), _lattice_key(p[0])))
        pending.remove(nxt)
        stops.append(Stop(nxt[0], nxt[1]))
        pose = nxt[0]
    name = "MBP-GC" if mode is FeasibilityMode.GRASP_CHECKED else "MBP"
    return _finish(scene, stops, name, t0, checks, latency, skipped, model)


def _pruned(irms, top_k, extra=None) -> tuple[list[int], list[list[Candidate]], list[int]]:
    objs, cands, skipped = [], [], []
    for oid, cs in sorted(irms.items()):
        feas = cs.feasible(True)
        if top_k is not None and np.isfinite(top_k):
            kept = feas[: int(top_k)]
            wanted = (extra or {}).get(oid, set())
            kept += [c for c in feas[int(top_k):] if c.base in wanted]
            feas = kept
        if feas:
            objs.append(oid)
            cands.append(feas)
        else:
            skipped.append(oid)
    return objs, cands, skipped


def _cost_tables(start: Pose2, flat: list[Candidate]):
    T = len(flat)
    start_nav = np.array([nav_time(start, c.base) for c in flat])
    nav = np.zeros((T, T))
    for a, ca in enumerate(flat):
        for b, cb in enumerate(flat):
            if a != b:
                nav[a, b] = nav_time(ca.base, cb.base)
    grasp = np.array([c.grasp_time for c in flat])
    return start_nav, nav, grasp


def _stops_from_sequence(seq: list[tuple[Candidate, int]]) -> list[Stop]:
    """Merge consecutive visits to the same lattice pose into one stop."""
    stops: list[Stop] = []
    for cand, oid in seq:
        if stops and stops[-1].base == cand.base:
            stops[-1] = Stop(cand.base, stops[-1].object_ids + (oid,))
        else:
            stops.append(Stop(cand.base, (oid,)))
    return stops


def _heuristic_picks(scene, irms, model) -> dict[int, set[Pose2]]:
    picks: dict[int, set[Pose2]] = {}
    for solver in (solve_pbg, solve_mbp):
        for stop in solver(scene, irms, FeasibilityMode.GRASP_CHECKED, 0.0, model).stops:
            for oid in stop.object_ids:
                picks.setdefault(oid, set()).add(stop.base)
    return picks


def solve_dp(scene, irms, top_k: int | None = 20, latency: float = 0.0,
             model: ManipulatorModel = DEFAULT_MODEL, seed_heuristics: bool = True) -> Plan:
    """Exact minimum of navigation plus grasp time over pruned grasp-checked candidates.

    State is (set of grasped objects, last candidate visited); each object keeps
    its ``top_k`` fastest-to-grasp candidates (``None`` keeps all). With
    ``seed_heuristics`` the poses chosen by PBG-GC and MBP-GC survive pruning
    too, so the result is never worse than either greedy plan. Visiting two
    objects from the same lattice pose costs no navigation, so multi-object
    stops fall out of the recurrence.
    """
    t0 = time.perf_counter()
    if scene.n_objects > DP_MAX_OBJECTS:
        raise InstanceTooLarge(f"DP supports at most {DP_MAX_OBJECTS} objects")
    _, checks = _feasible(irms, FeasibilityMode.GRASP_CHECKED)
    extra = _heuristic_picks(scene, irms, model) if seed_heuristics and top_k is not None else None
    objs, cands, skipped = _pruned(irms, top_k, extra)
    n = len(objs)
    if n == 0:
        return _finish(scene, [], "DP", t0, checks, latency, skipped, model)

    flat = [c for cs in cands for c in cs]
    owner = np.concatenate([[k] * len(cs) for k, cs in enumerate(cands)])
    idx = [np.flatnonzero(owner == k) for k in range(n)]
    start_nav, nav, grasp = _cost_tables(scene.robot_start, flat)

    full = (1 << n) - 1
    dp = np.full((full + 1, len(flat)), np.inf)
    parent = np.full((full + 1, len(flat)), -1, dtype=np.int64)
    for k in range(n):
        dp[1 << k, idx[k]] = start_nav[idx[k]] + grasp[idx[k]]
    for mask in range(1, full + 1):
        rows = np.flatnonzero(np.isfinite(dp[mask]))
        if rows.size == 0:
            continue
        base = dp[mask, rows][:, None]
        for k in range(n):
            if mask & (1 << k):
                continue
            cols = idx[k]
            total = base + nav[np.ix_(rows, cols)]
            arg = np.argmin(total, axis=0)
            val = total[arg, np.arange(cols.size)] + grasp[cols]
            nxt = mask | (1 << k)
            better = val < dp[nxt, cols]
            dp[nxt, cols[better]] = val[better]
            parent[nxt, cols[better]] = rows[arg[better]]

    last = int(np.argmin(dp[full]))
    seq = []
    mask = full
    while last >= 0:
        seq.append((flat[last], objs[owner[last]]))
        prev = int(parent[mask, last])
        mask &= ~(1 << int(owner[last]))
        last = prev
    seq.reverse()
    return _finish(scene, _stops_from_sequence(seq), "DP", t0, checks, latency, skipped, model)


def brute_force(scene, irms, cap_candidates: int = BRUTE_MAX_CANDIDATES,
                model: ManipulatorModel = DEFAULT_MODEL) -> Plan:
    """Exhaustive search over visit orders and candidate choices (test oracle)."""
    t0 = time.perf_counter()
    if scene.n_objects > BRUTE_MAX_OBJECTS or cap_candidates > BRUTE_MAX_CANDIDATES:
        raise InstanceTooLarge("brute force limited to 4 objects and 6 candidates each")
    objs, cands, skipped = _pruned(irms, cap_candidates)
    best_cost, best_seq = np.inf, []
    for order in itertools.permutations(range(len(objs))):
        for choice in itertools.product(*(cands[k] for k in order)):
            pose = scene.robot_start
            total = 0.0
            for cand in choice:
                total += nav_time(pose, cand.base) + cand.grasp_time
                pose = cand.base
            if total < best_cost:
                best_cost = total
                best_seq = [(cand, objs[k]) for cand, k in zip(choice, order)]
    return _finish(scene, _stops_from_sequence(best_seq), "BRUTE", t0, 0, 0.0, skipped, model)


def execute_plan(scene, plan: Plan, model: ManipulatorModel = DEFAULT_MODEL) -> ExecutionReport:
    """Simulate a plan under the trajectory-feasibility oracle.

    Navigation time accrues for every stop. A stop whose footprint hits the
    table fails all its objects; otherwise an object is grasped iff its
    trajectory is plannable from the stop. Failed grasps cost no grasp time.
    """
    success = {o.id: False for o in scene.objects}
    pose = scene.robot_start
    nav = grasp = 0.0
    for stop in plan.stops:
        nav += nav_time(pose, stop.base)
        pose = stop.base
        if footprint_collides(stop.base, scene.table):
            continue
        for oid in stop.object_ids:
            obj = scene.object_by_id(oid)
            if not success[oid] and trajectory_feasible(model, stop.base, obj, scene.table):
                success[oid] = True
                grasp += grasp_time(model, stop.base, obj, scene.table)
    return ExecutionReport(success, CostBreakdown(nav, grasp), sum(success.values()))


def plan_to_dict(plan: Plan) -> dict:
    return {
        "planner": plan.planner_name,
        "stops": [
            {"x": s.base.x, "y": s.base.y, "theta": s.base.theta, "objects": list(s.object_ids)}
            for s in plan.stops
        ],
        "predicted": plan.predicted_cost.as_dict(),
        "wall_time": plan.planning_wall_time,
    }


def plan_from_dict(d: dict) -> Plan:
    stops = [Stop(Pose2(s["x"], s["y"], s["theta"]), tuple(s["objects"])) for s in d["stops"]]
    pred = d.get("predicted", {})
    return Plan(stops, CostBreakdown(pred.get("nav", 0.0), pred.get("grasp", 0.0)),
                d.get("planner", ""), d.get("wall_time", 0.0))


def save_plan(plan: Plan, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(plan_to_dict(plan), indent=2) + "\n")
