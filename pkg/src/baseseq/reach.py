"""Analytic reachability surrogate and inverse reachability maps (IRMs).

The arm mount sits at a fixed offset on the base. A grasp has an IK solution
when the base is collision-free and the object lies in an annulus around the
mount. A grasp trajectory is plannable under the tighter condition that the
object is within ``r_traj_max`` of the mount and the base keeps ``clearance``
from the table edge.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EmptyCandidateSet, InfeasibleGrasp
from .world import (
    ROBOT_RADIUS,
    ObjectState,
    Pose2,
    TableRect,
    footprint_clearance,
    footprint_collides,
    inverse_transform,
    transform,
)

GRID_XY = 0.10
GRID_THETA = math.pi / 4


@dataclass(frozen=True)
class ManipulatorModel:
    mount_offset: Pose2 = Pose2(-0.20, -0.20, 0.0)
    r_min: float = 0.30
    r_max: float = 0.85
    r_traj_max: float = 0.75
    clearance: float = 0.10
    grasp_time_base: tuple[float, ...] = (10.0, 10.0, 10.0, 10.0, 10.0)
    grasp_time_per_meter: float = 8.0

    def __post_init__(self):
        if not (0 < self.r_min < self.r_traj_max < self.r_max):
            raise ValueError("need 0 < r_min < r_traj_max < r_max")
        if self.clearance < 0:
            raise ValueError("clearance must be non-negative")

    @property
    def reach_radius(self) -> float:
        """Largest base-center to object distance with an IK solution."""
        return self.r_max + math.hypot(self.mount_offset.x, self.mount_offset.y)


DEFAULT_MODEL = ManipulatorModel()


@dataclass(frozen=True)
class Candidate:
    base: Pose2
    ik_ok: bool
    traj_ok: bool
    grasp_time: float
    cell: tuple[int, int, int] = (0, 0, 0)


@dataclass(frozen=True)
class CandidateSet:
    object_id: int
    candidates: tuple[Candidate, ...] = field(default_factory=tuple)

    def __len__(self):
        return len(self.candidates)

    def feasible(self, grasp_checked: bool) -> list[Candidate]:
        if grasp_checked:
            return [c for c in self.candidates if c.traj_ok]
        return [c for c in self.candidates if c.ik_ok]


def mount_point(model: ManipulatorModel, base: Pose2) -> Pose2:
    return transform(model.mount_offset, base)


def reach_distance(model: ManipulatorModel, base: Pose2, obj: Pose2) -> float:
    m = mount_point(model, base)
    return math.hypot(obj.x - m.x, obj.y - m.y)


def _pose_of(obj) -> Pose2:
    return obj.pose if isinstance(obj, ObjectState) else obj


def ik_available(model: ManipulatorModel, base: Pose2, obj, table: TableRect) -> bool:
    if footprint_collides(base, table):
        return False
    d = reach_distance(model, base, _pose_of(obj))
    return model.r_min <= d <= model.r_max


def trajectory_feasible(model: ManipulatorModel, base: Pose2, obj, table: TableRect) -> bool:
    if not ik_available(model, base, obj, table):
        return False
    if reach_distance(model, base, _pose_of(obj)) > model.r_traj_max:
        return False
    return footprint_clearance(base, table) >= model.clearance


def grasp_time(model: ManipulatorModel, base: Pose2, obj, table: TableRect | None = None) -> float:
    """Seconds to execute the grasp of ``obj`` from ``base``.

    ``obj`` may be an ObjectState (class-dependent offset) or a bare Pose2
    (class 0). Raises InfeasibleGrasp when no IK solution exists; the
    collision part of that check needs ``table``.
    """
    pose = _pose_of(obj)
    class_id = obj.class_id if isinstance(obj, ObjectState) else 0
    d = reach_distance(model, base, pose)
    reachable = model.r_min <= d <= model.r_max
    if table is not None:
        reachable = reachable and not footprint_collides(base, table)
    if not reachable:
        raise InfeasibleGrasp(f"no IK solution from {base} (d={d:.3f})")
    return model.grasp_time_base[class_id] + model.grasp_time_per_meter * d


def lattice_pose(i: int, j: int, k: int, table: TableRect,
                 grid_xy: float = GRID_XY, grid_theta: float = GRID_THETA) -> Pose2:
    """World pose of lattice cell (i, j, k); the lattice lives in the table frame."""
    return transform(Pose2(i * grid_xy, j * grid_xy, k * grid_theta), table.center)


def heading_bins(grid_theta: float) -> range:
    n = int(round(2 * math.pi / grid_theta))
    # bins k*grid_theta for k in (-n/2, n/2] cover (-pi, pi] once each
    return range(-((n - 1) // 2), n // 2 + 1)


def build_irm(
    model: ManipulatorModel,
    obj: ObjectState,
    table: TableRect,
    grid_xy: float = GRID_XY,
    grid_theta: float = GRID_THETA,
) -> CandidateSet:
    """Enumerate lattice base poses from which ``obj`` has an IK solution."""
    if grid_xy <= 0 or grid_theta <= 0:
        raise ValueError("grid steps must be positive")
    local = inverse_transform(obj.pose, table.center)
    radius = model.reach_radius + 1e-9
    ii = np.arange(math.floor((local.x - radius) / grid_xy), math.ceil((local.x + radius) / grid_xy) + 1)
    jj = np.arange(math.floor((local.y - radius) / grid_xy), math.ceil((local.y + radius) / grid_xy) + 1)
    ks = np.array(list(heading_bins(grid_theta)))

    # vectorized prefilter with a loose tolerance; exact scalar checks decide
    I, J, K = np.meshgrid(ii, jj, ks, indexing="ij")
    x, y, th = I * grid_xy, J * grid_xy, K * grid_theta
    c, s = np.cos(th), np.sin(th)
    mx = x + c * model.mount_offset.x - s * model.mount_offset.y
    my = y + s * model.mount_offset.x + c * model.mount_offset.y
    d = np.hypot(local.x - mx, local.y - my)
    dx = np.maximum(np.abs(x) - table.half_length, 0.0)
    dy = np.maximum(np.abs(y) - table.half_width, 0.0)
    tol = 1e-7
    keep = (d >= model.r_min - tol) & (d <= model.r_max + tol) & (np.hypot(dx, dy) >= ROBOT_RADIUS - tol)

    candidates = []
    for i, j, k in zip(I[keep], J[keep], K[keep]):
        base = lattice_pose(int(i), int(j), int(k), table, grid_xy, grid_theta)
        if not ik_available(model, base, obj, table):
            continue
        candidates.append(
            Candidate(
                base=base,
                ik_ok=True,
                traj_ok=trajectory_feasible(model, base, obj, table),
                grasp_time=grasp_time(model, base, obj, table),
                cell=(int(i), int(j), int(k)),
            )
        )
    if not candidates:
        raise EmptyCandidateSet(f"object {obj.id} is unreachable from every grid pose")
    candidates.sort(key=lambda c: (c.grasp_time, c.base.x, c.base.y, c.base.theta))
    return CandidateSet(obj.id, tuple(candidates))


def build_irms(model: ManipulatorModel, scene, grid_xy: float = GRID_XY,
               grid_theta: float = GRID_THETA) -> dict[int, CandidateSet]:
    """IRMs for every object in the scene; unreachable objects get an empty set."""
    out = {}
    for obj in scene.objects:
        try:
            out[obj.id] = build_irm(model, obj, scene.table, grid_xy, grid_theta)
        except EmptyCandidateSet:
            out[obj.id] = CandidateSet(obj.id, ())
    return out
