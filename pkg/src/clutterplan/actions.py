"""Push sampling and geometric graspability.

The grasp test stands in for a learned grasp classifier: a parallel-jaw
gripper is modelled as two rectangular fingers centered on the target at a
fixed opening, swept over ``K`` discretized closing angles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from clutterplan import _kernels as K
from clutterplan.pushworld import (
    GripperTip,
    PhysicsConfig,
    PushAction,
    WorldState,
    physics_params,
)

N_GRASP_ANGLES = 16
DEFAULT_PUSHES_PER_OBJECT = 16
# stand-in for a classifier threshold of 0.9
DEFAULT_MARGIN_THRESHOLD = 0.003


@dataclass(frozen=True)
class GraspGeometry:
    finger_width: float = 0.02
    finger_thickness: float = 0.01
    opening: float = 0.085
    approach_clearance: float = 0.003
    n_angles: int = N_GRASP_ANGLES

    def __post_init__(self):
        if not (self.opening > 0 and self.finger_width > 0 and self.finger_thickness > 0):
            raise ValueError("gripper dimensions must be positive")
        if self.n_angles < 2 or self.n_angles % 2:
            raise ValueError("n_angles must be a positive even number")


class GraspAction(NamedTuple):
    x: float
    y: float
    angle_index: int

    def angle(self, n_angles: int = N_GRASP_ANGLES) -> float:
        return 2 * math.pi * self.angle_index / n_angles


class GraspReport(NamedTuple):
    graspable: bool
    margin: float
    best: GraspAction | None


def sample_pushes(state: WorldState, n_per_object: int = DEFAULT_PUSHES_PER_OBJECT,
                  tip: GripperTip = GripperTip(),
                  physics: PhysicsConfig = PhysicsConfig()) -> list[PushAction]:
    """Center-directed pushes starting just outside each object's contour.

    Ordered by object index, then by angle index; candidates whose start
    collides or whose endpoints leave the workspace are dropped.
    """
    if n_per_object < 1:
        raise ValueError("n_per_object must be >= 1")
    if state.n_objects == 0:
        return []
    return [PushAction(*row) for row in sample_push_array(state, n_per_object, tip, physics).tolist()]


def sample_push_array(state, n_per_object, tip, physics, params=None) -> np.ndarray:
    lay = state.layout
    if params is None:
        params = physics_params(state.workspace, tip, physics)
    offsets = lay.offsets(n_per_object, tip.radius + tip.clearance)
    buf = np.empty((state.n_objects * n_per_object, 4))
    count = K.sample_pushes(state.poses, *lay.arrays, params, offsets, buf)
    return buf[:count]


def _sweep(state: WorldState, geom: GraspGeometry):
    params = physics_params(state.workspace, grasp=geom)
    return K.grasp_sweep(state.poses, *state.layout.arrays, params, state.target_index)


def graspable(state: WorldState, geom: GraspGeometry = GraspGeometry(),
              margin_threshold: float = DEFAULT_MARGIN_THRESHOLD) -> GraspReport:
    """Whether some closing angle fits the fingers around the target.

    ``margin`` is the finger clearance to other objects for the best feasible
    pose (``inf`` when nothing else is on the table, 0 when no pose fits).
    """
    margin, k, gx, gy = _sweep(state, geom)
    if k < 0:
        return GraspReport(False, 0.0, None)
    best = GraspAction(float(gx), float(gy), int(k))
    return GraspReport(bool(margin >= margin_threshold), float(margin), best)


def best_grasp(state: WorldState, geom: GraspGeometry = GraspGeometry()) -> GraspAction | None:
    margin, k, gx, gy = _sweep(state, geom)
    if k < 0:
        return None
    return GraspAction(float(gx), float(gy), int(k))
