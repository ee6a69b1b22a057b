# app/hopper.py
# HopperLite: planar single-leg hopper. Torso (x, z, pitch), hip angle, spring-loaded
# prismatic leg. Diagonal generalized inertia, forces mapped through the foot Jacobian,
# spring-damper ground contact, semi-implicit Euler at control_dt / substeps.

from dataclasses import dataclass
from typing import FrozenSet, Optional, Sequence, Tuple

import numpy as np

from .env_config import EnvConfig, EnvParams, HopperConstants, SafetySpec, TaskRewardWeights, Terrain
from .envcore import ProtectiveEnv, SafetyView, StepResult, check_safe, clamp_actuation
from .errors import ContractViolation, IntegrationError
from .rewards import TaskFeatures, task_reward

# q = [x, z, pitch, leg_angle, leg_length]
X, Z, PITCH, HIP, LEG = range(5)

HOPPER_SAFETY = SafetySpec(h_min=0.75, pitch_max=0.8, allowed_contact_bodies=frozenset({"foot"}), legged=True)
HOPPER_WEIGHTS = TaskRewardWeights(w_vel=1.0, w_action=0.03, w_knee=0.5)


@dataclass
class HopperState:
    q: np.ndarray
    qd: np.ndarray
    contacts: FrozenSet[str] = frozenset()
    ground: float = 0.0  # terrain height under the torso

    def safety_view(self) -> SafetyView:
        if np.shape(self.q) != (5,) or np.shape(self.qd) != (5,):
            raise ContractViolation(f"hopper state needs 5 coordinates and 5 velocities, got {np.shape(self.q)}/{np.shape(self.qd)}")
        return SafetyView(
            contacts=self.contacts,
            height=float(self.q[Z] - self.ground),
            pitch=float(self.q[PITCH]),
        )

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.qd])


def _mass_diagonal(c: HopperConstants, params: EnvParams) -> np.ndarray:
    s = params.mass_scale
    return np.array([c.body_mass * s, c.body_mass * s, c.body_inertia * s, c.leg_inertia, c.leg_mass])


def foot_jacobian(q: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    phi = q[PITCH] + q[HIP]
    l = q[LEG]
    s, co = np.sin(phi), np.cos(phi)
    foot = np.array([q[X] + l * s, q[Z] - l * co])
    jac = np.array([
        [1.0, 0.0, l * co, l * co, s],
        [0.0, 1.0, l * s, l * s, -co],
    ])
    return foot, jac


def _contacts(q: np.ndarray, c: HopperConstants, terrain: Terrain) -> FrozenSet[str]:
    foot, _ = foot_jacobian(q)
    out = set()
    if foot[1] <= terrain.ground_height(foot[0]):
        out.add("foot")
    lowest = q[Z] - c.torso_half_length * abs(np.sin(q[PITCH]))
    if lowest <= terrain.ground_height(q[X]):
        out.add("torso")
    return frozenset(out)


def make_state(q: Sequence[float], qd: Sequence[float], constants: HopperConstants, terrain: Terrain) -> HopperState:
    q = np.asarray(q, dtype=float)
    qd = np.asarray(qd, dtype=float)
    return HopperState(q=q, qd=qd, contacts=_contacts(q, constants, terrain), ground=terrain.ground_height(q[X]))


def standing_pose(constants: HopperConstants, params: EnvParams) -> np.ndarray:
    weight = constants.body_mass * params.mass_scale * constants.gravity
    leg = constants.leg_rest - weight / constants.leg_stiffness
    sink = weight / constants.ground_stiffness
    return np.array([0.0, leg - sink, 0.0, 0.0, leg])


def hopper_energy(state: HopperState, params: EnvParams, constants: HopperConstants) -> float:
    """Kinetic + gravity + leg/hip spring + ground spring energy."""
    m = _mass_diagonal(constants, params)
    q, qd = state.q, state.qd
    foot, _ = foot_jacobian(q)
    pen = max(0.0, params.terrain.ground_height(foot[0]) - foot[1])
    return float(
        0.5 * np.sum(m * qd * qd)
        + m[Z] * constants.gravity * q[Z]
        + 0.5 * constants.leg_stiffness * (q[LEG] - constants.leg_rest) ** 2
        + 0.5 * constants.hip_stiffness * q[HIP] ** 2
        + 0.5 * constants.ground_stiffness * pen ** 2
    )


def _generalized_forces(q, qd, action, params: EnvParams, c: HopperConstants, m: np.ndarray):
    f = np.zeros(5)
    f[Z] -= m[Z] * c.gravity
    f[LEG] += c.leg_stiffness * (c.leg_rest - q[LEG]) - params.joint_damping * qd[LEG]
    f[HIP] += -c.hip_stiffness * q[HIP] - params.joint_damping * qd[HIP]

    applied = clamp_actuation(
        [c.hip_gear * action[0], c.leg_gear * action[1]],
        [qd[HIP], qd[LEG]],
        params,
    )
    f[HIP] += applied[0]
    f[PITCH] -= applied[0]
    f[LEG] += applied[1]

    foot, jac = foot_jacobian(q)
    pen = params.terrain.ground_height(foot[0]) - foot[1]
    if pen > 0:
        v = jac @ qd
        damping = c.ground_damping * (1.0 - params.restitution)
        normal = max(0.0, c.ground_stiffness * pen - damping * v[1])
        cap = params.friction * normal
        tangent = float(np.clip(-c.tangential_damping * v[0], -cap, cap))
        f += jac.T @ np.array([tangent, normal])
    return f, applied


def _hard_stops(q: np.ndarray, qd: np.ndarray, c: HopperConstants) -> None:
    if q[LEG] < c.leg_min:
        q[LEG] = c.leg_min
        qd[LEG] = max(qd[LEG], 0.0)
    elif q[LEG] > c.leg_max:
        q[LEG] = c.leg_max
        qd[LEG] = min(qd[LEG], 0.0)
    if abs(q[HIP]) > c.hip_limit:
        q[HIP] = np.sign(q[HIP]) * c.hip_limit
        qd[HIP] = 0.0


def hopper_step(
    state: HopperState,
    action: Sequence[float],
    params: EnvParams,
    dt: float,
    constants: HopperConstants = HopperConstants(),
    safety: SafetySpec = HOPPER_SAFETY,
    weights: TaskRewardWeights = HOPPER_WEIGHTS,
) -> Tuple[HopperState, StepResult]:
    if dt <= 0:
        raise ContractViolation("dt must be > 0")
    a = np.asarray(action, dtype=float)
    if a.shape != (2,) or not np.all(np.isfinite(a)):
        raise ContractViolation(f"hopper action must be a finite 2-vector, got {a!r}")
    if not (np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qd))):
        raise IntegrationError("non-finite hopper state before integration", state=state.as_vector(), action=a)

    m = _mass_diagonal(constants, params)
    h = dt / constants.substeps
    q = state.q.astype(float).copy()
    qd = state.qd.astype(float).copy()
    applied = np.zeros(2)
    for _ in range(constants.substeps):
        f, applied = _generalized_forces(q, qd, a, params, constants, m)
        qd = qd + h * f / m
        q = q + h * qd
        _hard_stops(q, qd, constants)

    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(qd))):
        raise IntegrationError(
            f"hopper integration diverged: q={q.tolist()} qd={qd.tolist()} action={a.tolist()}",
            state=np.concatenate([q, qd]),
            action=a,
        )

    nxt = make_state(q, qd, constants, params.terrain)
    knee = bool(q[LEG] <= constants.leg_min or q[LEG] >= constants.leg_max)
    reward = task_reward(TaskFeatures(forward_velocity=float(qd[X]), knee_at_limit=knee, hip_angle=float(q[HIP])), a, weights)
    safe = check_safe(nxt, safety)
    info = {
        "forward_velocity": float(qd[X]),
        "height": float(q[Z] - nxt.ground),
        "hip_torque": float(applied[0]),
        "leg_force": float(applied[1]),
        "knee_at_limit": float(knee),
    }
    return nxt, StepResult(
        next_observation=hopper_observation(nxt),
        reward=reward,
        is_safe=safe,
        is_terminal=not safe,
        info=info,
    )


def hopper_observation(state: HopperState) -> np.ndarray:
    # x is excluded; policies see height, orientation, joint positions and all velocities
    return np.array([
        state.q[Z] - state.ground, state.q[PITCH], state.q[HIP], state.q[LEG],
        *state.qd,
    ])


class HopperLite(ProtectiveEnv):
    action_dim = 2
    observation_dim = 9

    def __init__(self, config: EnvConfig, params: Optional[EnvParams] = None):
        self.constants = config.hopper or HopperConstants()
        super().__init__(config, params)
        self.state = make_state(standing_pose(self.constants, self.params), np.zeros(5), self.constants, self.params.terrain)

    def default_state(self, rng: np.random.Generator) -> HopperState:
        w = self.constants.init_noise
        q = standing_pose(self.constants, self.params)
        qd = np.zeros(5)
        if w > 0:
            q = q + rng.uniform(-w, w, size=5)
            qd = qd + rng.uniform(-w, w, size=5)
        return make_state(q, qd, self.constants, self.params.terrain)

    def get_state(self) -> np.ndarray:
        return self.state.as_vector()

    def _state_from_vector(self, vector: np.ndarray) -> HopperState:
        if vector.shape != (10,):
            raise ContractViolation(f"hopper state vector must have 10 entries, got {vector.shape}")
        return make_state(vector[:5], vector[5:], self.constants, self.params.terrain)

    def observation(self) -> np.ndarray:
        return hopper_observation(self.state)

    def _advance(self, commanded: np.ndarray, effective: np.ndarray) -> StepResult:
        self.state, res = hopper_step(
            self.state, effective, self.params, self.constants.control_dt,
            constants=self.constants, safety=self.safety, weights=self.weights,
        )
        if self.weights.w_action:
            # action penalty is charged on what the policy commanded this step
            res.reward += self.weights.w_action * (float(effective @ effective) - float(commanded @ commanded))
        return res
