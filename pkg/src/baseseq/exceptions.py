"""Exception types raised across the package."""


class SamplingExhausted(RuntimeError):
    """Rejection sampling hit its attempt cap without a valid scene."""


class InfeasibleGrasp(ValueError):
    """Grasp time requested for a base pose with no IK solution."""


class EmptyCandidateSet(ValueError):
    """No base pose on the grid can reach the object."""


class InvalidPlan(ValueError):
    """Plan references unknown objects or grasps an object twice."""


class InstanceTooLarge(ValueError):
    """Instance exceeds the size guard of an exact solver."""


class ShapeMismatch(ValueError):
    """Tensor shapes are inconsistent for the requested operation."""
