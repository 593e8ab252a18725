"""Action to SE(3) camera pose mapping and trajectory composition.

Convention: the camera looks along +z, +y is up, right-handed (so +x points
to the camera's left). TurnLeft is a positive rotation about +y.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .domain import Action, ActionKind, Pose, Trajectory, legal_magnitudes
from .errors import ValidationError


def _rot_y(deg: float) -> np.ndarray:
    th = math.radians(deg)
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def motion_pose(kind: ActionKind, magnitude: float) -> Pose:
    """Pose for an arbitrary (possibly partial) magnitude; no legality check."""
    if kind is ActionKind.MOVE_FORWARD:
        return Pose(tuple(np.eye(3).reshape(-1)), (0.0, 0.0, float(magnitude)))
    sign = 1.0 if kind is ActionKind.TURN_LEFT else -1.0
    return Pose(tuple(_rot_y(sign * magnitude).reshape(-1)), (0.0, 0.0, 0.0))


def action_to_pose(action: Action) -> Pose:
    if action.magnitude not in legal_magnitudes(action.kind):
        raise ValidationError(f"illegal action {action}")
    return motion_pose(action.kind, action.magnitude)


def compose(a: Pose, b: Pose) -> Pose:
    """``a`` then ``b``, with ``b`` expressed in the frame reached by ``a``."""
    Ra, Rb = a.R, b.R
    R = Ra @ Rb
    t = Ra @ b.t + a.t
    return Pose(tuple(R.reshape(-1)), tuple(t))


def trajectory_poses(actions: Sequence[Action]) -> Trajectory:
    if not actions:
        raise ValidationError("trajectory needs at least one action")
    steps = []
    pose = Pose.identity()
    for a in actions:
        pose = compose(pose, action_to_pose(a))
        steps.append((a, pose))
    return Trajectory(tuple(steps))


def extend(traj: Trajectory, action: Action) -> Trajectory:
    pose = compose(traj.final_pose, action_to_pose(action))
    return Trajectory(traj.steps + ((action, pose),))


def camera_pose(start: Pose, traj: Trajectory) -> Pose:
    """World pose of the camera after ``traj`` from ``start``."""
    return compose(start, traj.final_pose)


def heading_deg(pose: Pose) -> float:
    """Yaw of the camera forward axis about +y, degrees, leftward positive."""
    fwd = pose.R @ np.array([0.0, 0.0, 1.0])
    return math.degrees(math.atan2(fwd[0], fwd[2]))
