"""Navigation-time model and plan cost accounting."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .world import Pose2, wrap_angle

V_LIN = 0.5
V_ANG = 0.5


@dataclass(frozen=True)
class CostBreakdown:
    nav_time: float = 0.0
    grasp_time: float = 0.0

    @property
    def total(self) -> float:
        return self.nav_time + self.grasp_time

    def __add__(self, other: CostBreakdown) -> CostBreakdown:
        return CostBreakdown(self.nav_time + other.nav_time, self.grasp_time + other.grasp_time)

    def as_dict(self) -> dict:
        return {"nav": self.nav_time, "grasp": self.grasp_time, "total": self.total}


def nav_time(start: Pose2, goal: Pose2, v_lin: float = V_LIN, v_ang: float = V_ANG) -> float:
    """Rotate toward the goal, drive straight, rotate into the goal heading."""
    if v_lin <= 0 or v_ang <= 0:
        raise ValueError("velocities must be positive")
    dx, dy = goal.x - start.x, goal.y - start.y
    dist = math.hypot(dx, dy)
    if dist < 1e-9:
        return abs(wrap_angle(goal.theta - start.theta)) / v_ang
    bearing = math.atan2(dy, dx)
    turn_in = abs(wrap_angle(bearing - start.theta))
    turn_out = abs(wrap_angle(goal.theta - bearing))
    return (turn_in + turn_out) / v_ang + dist / v_lin


def plan_cost(scene, plan, model, v_lin: float = V_LIN, v_ang: float = V_ANG) -> CostBreakdown:
    """Predicted cost of a plan: travel through every stop, grasp what is reachable.

    Objects without an IK solution at their stop add no grasp time.
    """
    from .reach import grasp_time, ik_available
    from .solvers import validate_plan

    validate_plan(scene, plan)
    pose = scene.robot_start
    nav = grasp = 0.0
    for stop in plan.stops:
        nav += nav_time(pose, stop.base, v_lin, v_ang)
        pose = stop.base
        for oid in stop.object_ids:
            obj = scene.object_by_id(oid)
            if ik_available(model, stop.base, obj, scene.table):
                grasp += grasp_time(model, stop.base, obj, scene.table)
    return CostBreakdown(nav, grasp)
