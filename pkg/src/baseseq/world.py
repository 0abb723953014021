"""Planar geometry, scene representation, sampling and table collision."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import SamplingExhausted

ROBOT_RADIUS = 0.45
TABLE_MARGIN = 0.05
MIN_OBJECT_SEPARATION = 0.15
N_CLASSES = 5
MAX_SAMPLING_ATTEMPTS = 10_000
BENCH_ANNULUS = (2.5, 3.0)
TRAIN_ANNULUS = (0.8, 3.0)


def wrap_angle(theta: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    t = math.remainder(theta, 2.0 * math.pi)
    if t <= -math.pi:
        t += 2.0 * math.pi
    return t


@dataclass(frozen=True)
class Pose2:
    """SE(2) pose. ``theta`` is normalized to (-pi, pi] on construction."""

    x: float = 0.0
    y: float = 0.0
    theta: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])

    def features(self) -> list[float]:
        return [self.x, self.y, math.cos(self.theta), math.sin(self.theta)]

    def distance(self, other: Pose2) -> float:
        return math.hypot(other.x - self.x, other.y - self.y)


IDENTITY = Pose2()


def transform(pose: Pose2, frame: Pose2) -> Pose2:
    """Express ``pose`` (given in ``frame``) in the parent frame of ``frame``."""
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    return Pose2(
        frame.x + c * pose.x - s * pose.y,
        frame.y + s * pose.x + c * pose.y,
        frame.theta + pose.theta,
    )


def inverse_transform(pose: Pose2, frame: Pose2) -> Pose2:
    """Express ``pose`` (given in the parent frame) relative to ``frame``."""
    c, s = math.cos(frame.theta), math.sin(frame.theta)
    dx, dy = pose.x - frame.x, pose.y - frame.y
    return Pose2(c * dx + s * dy, -s * dx + c * dy, pose.theta - frame.theta)


@dataclass(frozen=True)
class TableRect:
    center: Pose2 = IDENTITY
    half_length: float = 1.0
    half_width: float = 0.4


@dataclass(frozen=True)
class ObjectState:
    id: int
    class_id: int
    pose: Pose2


@dataclass(frozen=True)
class Scene:
    table: TableRect
    objects: tuple[ObjectState, ...]
    robot_start: Pose2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def object_by_id(self, object_id: int) -> ObjectState:
        for obj in self.objects:
            if obj.id == object_id:
                return obj
        raise KeyError(object_id)

    def with_objects(self, objects: Sequence[ObjectState]) -> Scene:
        return Scene(self.table, tuple(objects), self.robot_start, self.seed)

    def with_robot(self, robot: Pose2) -> Scene:
        return Scene(self.table, self.objects, robot, self.seed)


def table_distance(base: Pose2, table: TableRect) -> float:
    """Distance from the base center to the table rectangle (0 inside)."""
    local = inverse_transform(base, table.center)
    dx = max(abs(local.x) - table.half_length, 0.0)
    dy = max(abs(local.y) - table.half_width, 0.0)
    return math.hypot(dx, dy)


def footprint_collides(base: Pose2, table: TableRect, radius: float = ROBOT_RADIUS) -> bool:
    """True iff the robot's footprint disc overlaps the table rectangle."""
    return table_distance(base, table) < radius


def footprint_clearance(base: Pose2, table: TableRect, radius: float = ROBOT_RADIUS) -> float:
    return table_distance(base, table) - radius


def sample_scene(
    seed: int,
    n_objects: int,
    start_annulus: Sequence[float] = BENCH_ANNULUS,
    table: TableRect | None = None,
) -> Scene:
    """Sample a random pickup scene; a pure function of its arguments.

    Objects are placed uniformly on the table top (inset by the edge margin)
    with pairwise separation enforced by rejection. The robot start is drawn
    uniformly in radius and bearing inside ``start_annulus`` around the table
    center and rejected while its footprint touches the table.
    """
    if not 1 <= n_objects <= 10:
        raise ValueError(f"n_objects must be in [1, 10], got {n_objects}")
    r_lo, r_hi = float(start_annulus[0]), float(start_annulus[1])
    if not (0 < r_lo <= r_hi):
        raise ValueError(f"invalid start annulus {start_annulus}")
    table = table or TableRect()
    rng = np.random.default_rng(seed)

    hx = table.half_length - TABLE_MARGIN
    hy = table.half_width - TABLE_MARGIN
    placed: list[tuple[float, float]] = []
    objects = []
    attempts = 0
    while len(objects) < n_objects:
        attempts += 1
        if attempts > MAX_SAMPLING_ATTEMPTS:
            raise SamplingExhausted(f"could not place {n_objects} objects (seed={seed})")
        x = rng.uniform(-hx, hx)
        y = rng.uniform(-hy, hy)
        if any(math.hypot(x - px, y - py) < MIN_OBJECT_SEPARATION for px, py in placed):
            continue
        theta = rng.uniform(-math.pi, math.pi)
        class_id = int(rng.integers(N_CLASSES))
        placed.append((x, y))
        local = Pose2(x, y, theta)
        objects.append(ObjectState(len(objects), class_id, transform(local, table.center)))

    for _ in range(MAX_SAMPLING_ATTEMPTS):
        r = rng.uniform(r_lo, r_hi)
        bearing = rng.uniform(-math.pi, math.pi)
        heading = rng.uniform(-math.pi, math.pi)
        local = Pose2(r * math.cos(bearing), r * math.sin(bearing), heading)
        start = transform(local, table.center)
        if not footprint_collides(start, table):
            return Scene(table, tuple(objects), start, seed)
    raise SamplingExhausted(f"no collision-free robot start in annulus {start_annulus}")


def _pose_dict(p: Pose2) -> dict:
    return {"x": p.x, "y": p.y, "theta": p.theta}


def scene_to_dict(scene: Scene) -> dict:
    t = scene.table
    return {
        "seed": scene.seed,
        "table": {
            "cx": t.center.x,
            "cy": t.center.y,
            "ctheta": t.center.theta,
            "half_length": t.half_length,
            "half_width": t.half_width,
        },
        "objects": [
            {"id": o.id, "class_id": o.class_id, **_pose_dict(o.pose)} for o in scene.objects
        ],
        "robot_start": _pose_dict(scene.robot_start),
    }


def scene_from_dict(d: dict) -> Scene:
    t = d["table"]
    table = TableRect(Pose2(t["cx"], t["cy"], t["ctheta"]), t["half_length"], t["half_width"])
    objects = tuple(
        ObjectState(int(o["id"]), int(o["class_id"]), Pose2(o["x"], o["y"], o["theta"]))
        for o in d["objects"]
    )
    r = d["robot_start"]
    return Scene(table, objects, Pose2(r["x"], r["y"], r["theta"]), int(d.get("seed", 0)))


def save_scene(scene: Scene, path: str | Path) -> None:
    # json writes floats with repr(), which round-trips all 17 significant digits
    Path(path).write_text(json.dumps(scene_to_dict(scene), indent=2) + "\n")


def load_scene(path: str | Path) -> Scene:
    return scene_from_dict(json.loads(Path(path).read_text()))
