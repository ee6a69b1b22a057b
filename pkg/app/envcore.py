# app/envcore.py
# Shared environment machinery: safety-set checks, domain randomization, latency,
# actuation limits and the gymnasium base class both environments build on.

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, FrozenSet, Optional, Sequence, Tuple

import gymnasium as gym
import numpy as np

from .env_config import RANDOMIZABLE_FIELDS, EnvConfig, EnvParams, RandomizationRanges, SafetySpec
from .errors import ContractViolation, EmptyBufferError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SafetyView:
    """The quantities check_safe looks at. None = not applicable to this environment."""

    contacts: FrozenSet[str] = frozenset()
    height: Optional[float] = None
    pitch: Optional[float] = None
    roll: Optional[float] = None
    yaw: Optional[float] = None
    position: Optional[Tuple[float, float]] = None
    speed: Optional[float] = None


@dataclass
class StepResult:
    next_observation: np.ndarray
    reward: float
    is_safe: bool
    is_terminal: bool
    info: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        # leaving the safe set always ends the rollout
        if not self.is_safe:
            self.is_terminal = True


def check_safe(state: Any, spec: SafetySpec) -> bool:
    view: SafetyView = state.safety_view()

    if spec.legged and not view.contacts <= spec.allowed_contact_bodies:
        return False
    if view.height is not None and not view.height >= spec.h_min:
        return False
    for value, bound in ((view.pitch, spec.pitch_max), (view.roll, spec.roll_max), (view.yaw, spec.yaw_max)):
        if value is not None and not abs(value) <= bound:
            return False
    if view.position is not None:
        px, py = view.position
        if any(r.contains(px, py) for r in spec.hazard_regions):
            return False
    if view.speed is not None and not view.speed <= spec.speed_max:
        return False
    return True


def sample_params(
    ranges: RandomizationRanges,
    rng: np.random.Generator,
    defaults: Optional[EnvParams] = None,
) -> EnvParams:
    base = defaults or EnvParams()
    if not ranges.ranges:
        return base
    drawn: Dict[str, Any] = {}
    # fixed field order keeps draws reproducible for a given seed
    for name in RANDOMIZABLE_FIELDS:
        if name not in ranges.ranges:
            continue
        lo, hi = ranges.ranges[name]
        if name == "latency_steps":
            drawn[name] = int(rng.integers(int(np.ceil(lo)), int(np.floor(hi)) + 1))
        else:
            drawn[name] = float(rng.uniform(lo, hi))
    return base.model_copy(update=drawn)


class LatencyBuffer:
    """FIFO of pending actions; holds exactly latency_steps entries."""

    def __init__(self, latency_steps: int, default_action: Sequence[float]):
        if latency_steps < 0:
            raise ContractViolation("latency_steps must be >= 0")
        self.latency_steps = latency_steps
        self.default_action = np.asarray(default_action, dtype=float).copy()
        self.queue: deque = deque()
        self.reset()

    def reset(self) -> None:
        self.queue = deque(self.default_action.copy() for _ in range(self.latency_steps))

    def __len__(self) -> int:
        return len(self.queue)


def apply_latency(buffer: LatencyBuffer, action: Sequence[float]) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    if a.shape != buffer.default_action.shape:
        raise ContractViolation(f"action shape {a.shape} != {buffer.default_action.shape}")
    if buffer.latency_steps == 0:
        return a
    buffer.queue.append(a.copy())
    return buffer.queue.popleft()


def clamp_actuation(torque: Sequence[float], joint_velocity: Sequence[float], params: EnvParams) -> np.ndarray:
    tau = np.asarray(torque, dtype=float)
    qd = np.asarray(joint_velocity, dtype=float)
    if tau.shape != qd.shape:
        raise ContractViolation("torque and joint velocity dimensions differ")
    tau = np.clip(tau, -params.torque_limit, params.torque_limit)
    if np.isfinite(params.motor_power_limit):
        speed = np.abs(qd)
        over = (speed > 0) & (np.abs(tau * qd) > params.motor_power_limit)
        safe_speed = np.where(speed > 0, speed, 1.0)
        tau = np.where(over, np.sign(tau) * params.motor_power_limit / safe_speed, tau)
    return tau


class ActionRateLimiter:
    """Caps the per-dimension change between consecutive actions."""

    def __init__(self, max_delta: float):
        self.max_delta = max_delta
        self.last: Optional[np.ndarray] = None

    def reset(self) -> None:
        self.last = None

    def __call__(self, action: np.ndarray) -> np.ndarray:
        if self.last is not None:
            action = np.clip(action, self.last - self.max_delta, self.last + self.max_delta)
        self.last = np.array(action, dtype=float)
        return action


class ProtectiveEnv(gym.Env):
    """Base class: safety-terminated, domain-randomizable, state-restorable environment."""

    metadata = {"render_modes": []}
    action_dim: int = 0
    observation_dim: int = 0

    def __init__(self, config: EnvConfig, params: Optional[EnvParams] = None):
        super().__init__()
        self.config = config
        self.safety = config.safety
        self.weights = config.reward
        self.horizon = config.horizon
        self.action_space = gym.spaces.Box(-1.0, 1.0, shape=(self.action_dim,), dtype=np.float64)
        self.observation_space = gym.spaces.Box(-np.inf, np.inf, shape=(self.observation_dim,), dtype=np.float64)
        self.limiter = ActionRateLimiter(config.action_rate_limit) if config.action_rate_limit else None
        self.params = config.params
        self.latency = LatencyBuffer(0, np.zeros(self.action_dim))
        self.set_params(params or config.params)
        self.state: Any = None

    # --- parameters -------------------------------------------------
    def set_params(self, params: EnvParams) -> None:
        self.params = params
        self.latency = LatencyBuffer(params.latency_steps, np.zeros(self.action_dim))

    # --- gymnasium api ------------------------------------------------
    def reset(self, *, seed: Optional[int] = None, options: Optional[Dict[str, Any]] = None):
        super().reset(seed=seed)
        buffer = (options or {}).get("seed_buffer")
        if buffer is not None:
            if len(buffer) == 0:
                raise EmptyBufferError("seed-state buffer is empty")
            idx = int(self.np_random.integers(len(buffer)))
            self.set_state(buffer.states[idx])
        else:
            self.state = self.default_state(self.np_random)
        self._clear_action_history()
        return self.observation(), {}

    def step(self, action):
        res = self.transition(action)
        info: Dict[str, Any] = dict(res.info)
        info["is_safe"] = res.is_safe
        return res.next_observation, res.reward, res.is_terminal, False, info

    # --- toolkit api ------------------------------------------------
    def transition(self, action: Sequence[float]) -> StepResult:
        a = np.asarray(action, dtype=float)
        if a.shape != (self.action_dim,):
            raise ContractViolation(f"expected action of shape ({self.action_dim},), got {a.shape}")
        a = np.clip(a, -1.0, 1.0)
        if self.limiter is not None:
            a = self.limiter(a)
        effective = apply_latency(self.latency, a)
        return self._advance(a, effective)

    def is_safe(self) -> bool:
        return check_safe(self.state, self.safety)

    def set_state(self, vector: Sequence[float]) -> None:
        self.state = self._state_from_vector(np.asarray(vector, dtype=float))
        self._clear_action_history()

    def _clear_action_history(self) -> None:
        self.latency.reset()
        if self.limiter is not None:
            self.limiter.reset()

    # --- subclass hooks ---------------------------------------------
    def default_state(self, rng: np.random.Generator) -> Any:
        raise NotImplementedError

    def get_state(self) -> np.ndarray:
        raise NotImplementedError

    def _state_from_vector(self, vector: np.ndarray) -> Any:
        raise NotImplementedError

    def observation(self) -> np.ndarray:
        raise NotImplementedError

    def _advance(self, commanded: np.ndarray, effective: np.ndarray) -> StepResult:
        raise NotImplementedError
