"""Base-pose sequence planning for a mobile manipulator picking tabletop objects."""

from .cost import CostBreakdown, nav_time, plan_cost
from .reach import DEFAULT_MODEL, ManipulatorModel, build_irm, build_irms
from .solvers import FeasibilityMode, Plan, Stop, brute_force, execute_plan, solve_dp, solve_mbp, solve_pbg
from .world import Pose2, Scene, TableRect, load_scene, sample_scene, save_scene

__version__ = "0.1.0"

__all__ = [
    "CostBreakdown", "nav_time", "plan_cost", "DEFAULT_MODEL", "ManipulatorModel", "build_irm", "build_irms",
    "FeasibilityMode", "Plan", "Stop", "brute_force", "execute_plan", "solve_dp", "solve_mbp", "solve_pbg",
    "Pose2", "Scene", "TableRect", "load_scene", "sample_scene", "save_scene",
]
