# app/rewards.py
from typing import NamedTuple, Sequence

import numpy as np

from .env_config import TaskRewardWeights


class TaskFeatures(NamedTuple):
    forward_velocity: float
    knee_at_limit: bool = False
    hip_angle: float = 0.0
    lateral_deviation: float = 0.0


def task_reward(features: TaskFeatures, action: Sequence[float], weights: TaskRewardWeights) -> float:
    """alive + w_vel*min(xdot, v_max) - w_action*|a|^2 - w_knee*r_knee - w_hip*|q_hip| - w_dev*|y|"""
    r = weights.alive_bonus
    if weights.w_vel:
        r += weights.w_vel * min(features.forward_velocity, weights.v_max)
    if weights.w_action:
        a = np.asarray(action, dtype=float)
        r -= weights.w_action * float(a @ a)
    if weights.w_knee and features.knee_at_limit:
        r -= weights.w_knee
    if weights.w_hip:
        r -= weights.w_hip * abs(features.hip_angle)
    if weights.w_dev:
        r -= weights.w_dev * abs(features.lateral_deviation)
    return float(r)
