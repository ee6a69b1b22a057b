# app/pointnav.py
# PointNav2D: damped double integrator driving toward a fixed goal through a corridor
# bounded by hazard rectangles, with a speed cap.

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .env_config import EnvConfig, EnvParams, PointNavConstants, Rect, SafetySpec, TaskRewardWeights
from .envcore import ProtectiveEnv, SafetyView, StepResult, check_safe, clamp_actuation
from .errors import ContractViolation
from .rewards import TaskFeatures, task_reward

NAV_SAFETY = SafetySpec(
    hazard_regions=(
        Rect(x_min=-2.0, y_min=0.5, x_max=8.0, y_max=3.0),
        Rect(x_min=-2.0, y_min=-3.0, x_max=8.0, y_max=-0.5),
        Rect(x_min=-2.0, y_min=-3.0, x_max=-1.0, y_max=3.0),
        Rect(x_min=7.0, y_min=-3.0, x_max=8.0, y_max=3.0),
        Rect(x_min=2.0, y_min=0.2, x_max=3.0, y_max=0.5),
    ),
    speed_max=2.0,
)
NAV_WEIGHTS = TaskRewardWeights(v_max=1.0, w_vel=1.0, w_action=0.05)


@dataclass
class NavState:
    position: np.ndarray
    velocity: np.ndarray
    goal: np.ndarray

    def safety_view(self) -> SafetyView:
        for name in ("position", "velocity", "goal"):
            if np.shape(getattr(self, name)) != (2,):
                raise ContractViolation(f"nav state {name} must be a 2-vector")
        return SafetyView(
            position=(float(self.position[0]), float(self.position[1])),
            speed=float(np.linalg.norm(self.velocity)),
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity, self.goal])


def nav_observation(state: NavState) -> np.ndarray:
    return np.concatenate([state.position, state.velocity, state.goal - state.position])


def nav_step(
    state: NavState,
    action: Sequence[float],
    params: EnvParams,
    dt: float,
    constants: PointNavConstants = PointNavConstants(),
    safety: SafetySpec = NAV_SAFETY,
    weights: TaskRewardWeights = NAV_WEIGHTS,
) -> Tuple[NavState, StepResult]:
    if dt <= 0:
        raise ContractViolation("dt must be > 0")
    a = np.asarray(action, dtype=float)
    force = clamp_actuation(constants.accel_scale * params.mass_scale * a, state.velocity, params)
    damping = constants.damping * params.friction

    velocity = state.velocity + dt * (force / params.mass_scale - damping * state.velocity)
    position = state.position + dt * velocity
    nxt = NavState(position=position, velocity=velocity, goal=state.goal.copy())

    progress = np.linalg.norm(state.goal - state.position) - np.linalg.norm(nxt.goal - position)
    reward = task_reward(TaskFeatures(forward_velocity=float(progress / dt)), a, weights)
    safe = check_safe(nxt, safety)
    info = {
        "progress_rate": float(progress / dt),
        "speed": float(np.linalg.norm(velocity)),
        "goal_distance": float(np.linalg.norm(nxt.goal - position)),
    }
    return nxt, StepResult(
        next_observation=nav_observation(nxt),
        reward=reward,
        is_safe=safe,
        is_terminal=not safe,
        info=info,
    )


class PointNav2D(ProtectiveEnv):
    action_dim = 2
    observation_dim = 6

    def __init__(self, config: EnvConfig, params: Optional[EnvParams] = None):
        self.constants = config.pointnav or PointNavConstants()
        super().__init__(config, params)
        self.state = self._canonical()

    def _canonical(self) -> NavState:
        return NavState(
            position=np.array(self.constants.start, dtype=float),
            velocity=np.zeros(2),
            goal=np.array(self.constants.goal, dtype=float),
        )

    def default_state(self, rng: np.random.Generator) -> NavState:
        s = self._canonical()
        w = self.constants.init_noise
        if w > 0:
            s.position = s.position + rng.uniform(-w, w, size=2)
        return s

    def get_state(self) -> np.ndarray:
        return self.state.as_vector()

    def _state_from_vector(self, vector: np.ndarray) -> NavState:
        if vector.shape != (6,):
            raise ContractViolation(f"nav state vector must have 6 entries, got {vector.shape}")
        return NavState(position=vector[:2].copy(), velocity=vector[2:4].copy(), goal=vector[4:].copy())

    def observation(self) -> np.ndarray:
        return nav_observation(self.state)

    def _advance(self, commanded: np.ndarray, effective: np.ndarray) -> StepResult:
        self.state, res = nav_step(
            self.state, effective, self.params, self.constants.control_dt,
            constants=self.constants, safety=self.safety, weights=self.weights,
        )
        if self.weights.w_action:
            res.reward += self.weights.w_action * (float(effective @ effective) - float(commanded @ commanded))
        return res
