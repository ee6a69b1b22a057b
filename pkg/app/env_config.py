# app/env_config.py
# Typed records for environments: safety set, physical parameters, randomization ranges,
# terrain, and the canonical constant sets. Everything here round-trips through the
# versioned YAML config files under configs/.

import math
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Type, TypeVar, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError

SCHEMA_VERSION = 1
INF = math.inf

M = TypeVar("M", bound=BaseModel)


class Rect(BaseModel):
    """Axis-aligned rectangle (x_min, y_min, x_max, y_max)."""

    model_config = ConfigDict(frozen=True)

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    @model_validator(mode="after")
    def _ordered(self) -> "Rect":
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError("rectangle bounds must be ordered")
        return self

    def contains(self, x: float, y: float) -> bool:
        return self.x_min <= x <= self.x_max and self.y_min <= y <= self.y_max


class SafetySpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    h_min: float = INF
    pitch_max: float = INF
    roll_max: float = INF
    yaw_max: float = INF
    allowed_contact_bodies: frozenset[str] = frozenset()
    hazard_regions: Tuple[Rect, ...] = ()
    speed_max: float = INF
    legged: bool = False

    @field_validator("pitch_max", "roll_max", "yaw_max", "speed_max")
    @classmethod
    def _positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("bounds must be strictly positive or +inf")
        return v

    @field_validator("h_min")
    @classmethod
    def _height(cls, v: float) -> float:
        # +inf on a state without a height (navigation) means the check is inert
        if not (v > 0 or math.isinf(v)):
            raise ValueError("h_min must be strictly positive or +inf")
        return v

    @model_validator(mode="after")
    def _contacts(self) -> "SafetySpec":
        if self.legged and not self.allowed_contact_bodies:
            raise ValueError("legged environments need a nonempty contact whitelist")
        return self


class Terrain(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["flat", "slope", "steps"] = "flat"
    angle: float = 0.0  # slope, radians
    run: float = 0.5  # steps, horizontal length
    rise: float = 0.03  # steps, height of each step
    start: float = 0.3  # terrain starts deviating from flat at this x

    def ground_height(self, x: float) -> float:
        if self.kind == "flat" or x <= self.start:
            return 0.0
        if self.kind == "slope":
            return (x - self.start) * math.tan(self.angle)
        return math.floor((x - self.start) / self.run + 1.0) * self.rise


class EnvParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    mass_scale: float = 1.0
    friction: float = 0.8
    restitution: float = 0.0
    joint_damping: float = 1.0
    motor_power_limit: float = INF
    torque_limit: float = INF
    latency_steps: int = 0
    terrain: Terrain = Terrain()

    @field_validator("mass_scale")
    @classmethod
    def _mass(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("mass_scale must be > 0")
        return v

    @field_validator("friction", "joint_damping")
    @classmethod
    def _nonneg(cls, v: float) -> float:
        if v < 0:
            raise ValueError("must be >= 0")
        return v

    @field_validator("restitution")
    @classmethod
    def _unit(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("restitution must lie in [0, 1]")
        return v

    @field_validator("motor_power_limit", "torque_limit")
    @classmethod
    def _limit(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("actuation limits must be > 0 (+inf = off)")
        return v

    @field_validator("latency_steps")
    @classmethod
    def _latency(cls, v: int) -> int:
        if v < 0:
            raise ValueError("latency_steps must be >= 0")
        return v


RANDOMIZABLE_FIELDS: Tuple[str, ...] = (
    "mass_scale",
    "friction",
    "restitution",
    "joint_damping",
    "motor_power_limit",
    "torque_limit",
    "latency_steps",
)


class RandomizationRanges(BaseModel):
    """Closed sampling intervals per EnvParams field; absent fields stay at defaults."""

    model_config = ConfigDict(frozen=True)

    ranges: Dict[str, Tuple[float, float]] = Field(default_factory=dict)

    @field_validator("ranges")
    @classmethod
    def _valid(cls, v: Dict[str, Tuple[float, float]]) -> Dict[str, Tuple[float, float]]:
        for name, (lo, hi) in v.items():
            if name not in RANDOMIZABLE_FIELDS:
                raise ValueError(f"'{name}' is not a randomizable EnvParams field")
            if not (math.isfinite(lo) and math.isfinite(hi)):
                raise ValueError(f"range for '{name}' must be finite")
            if lo > hi:
                raise ValueError(f"range for '{name}' has lower bound above upper bound")
        return v

    def contains(self, params: EnvParams) -> bool:
        for name, (lo, hi) in self.ranges.items():
            if not lo <= getattr(params, name) <= hi:
                return False
        return True


class TaskRewardWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    v_max: float = INF
    w_vel: float = 1.0
    w_action: float = 0.0
    w_knee: float = 0.0
    w_hip: float = 0.0
    w_dev: float = 0.0
    alive_bonus: float = 1.0

    @model_validator(mode="after")
    def _weights(self) -> "TaskRewardWeights":
        for name in ("w_vel", "w_action", "w_knee", "w_hip", "w_dev", "alive_bonus"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not self.v_max > 0:
            raise ValueError("v_max must be > 0 or +inf")
        return self


class HopperConstants(BaseModel):
    """Tuned HopperLite constant set (canonical: configs/hopper.yaml)."""

    model_config = ConfigDict(frozen=True)

    body_mass: float = 3.0
    body_inertia: float = 2.5
    leg_mass: float = 0.3
    leg_inertia: float = 0.2
    gravity: float = 9.81
    leg_rest: float = 1.0
    leg_min: float = 0.6
    leg_max: float = 1.05
    leg_stiffness: float = 600.0
    hip_stiffness: float = 100.0
    hip_limit: float = 1.0
    ground_stiffness: float = 1.0e4
    ground_damping: float = 100.0
    tangential_damping: float = 80.0
    torso_half_length: float = 0.25
    hip_gear: float = 10.0
    leg_gear: float = 150.0
    control_dt: float = 0.02
    substeps: int = 10
    init_noise: float = 0.01


class PointNavConstants(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: Tuple[float, float] = (0.0, 0.0)
    goal: Tuple[float, float] = (5.0, 0.0)
    accel_scale: float = 4.0
    damping: float = 0.6
    control_dt: float = 0.02
    init_noise: float = 0.05


class EnvConfig(BaseModel):
    """One environment's canonical config file."""

    schema_version: int = SCHEMA_VERSION
    env: Literal["hopper", "pointnav"]
    safety: SafetySpec
    reward: TaskRewardWeights
    params: EnvParams = EnvParams()
    randomization: RandomizationRanges = RandomizationRanges()
    hopper: Optional[HopperConstants] = None
    pointnav: Optional[PointNavConstants] = None
    action_rate_limit: Optional[float] = None
    horizon: int = 1000


# ---------------------------
# YAML I/O
# ---------------------------

def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_plain(v) for v in obj)
    return obj


def dump_model(model: BaseModel) -> Dict[str, Any]:
    data = _plain(model.model_dump(mode="python"))
    data.setdefault("schema_version", SCHEMA_VERSION)
    return data


def save_yaml(model: BaseModel, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(dump_model(model), f, sort_keys=False)
    return path


def load_yaml(cls: Type[M], path: Union[str, Path]) -> M:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    return parse_config(cls, data, source=str(path))


def parse_config(cls: Type[M], data: Dict[str, Any], source: str = "<dict>") -> M:
    data = dict(data)
    version = data.pop("schema_version", None)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(
            f"{source}: schema_version {version!r} is not supported (expected {SCHEMA_VERSION})"
        )
    if "schema_version" in cls.model_fields:
        data["schema_version"] = version
    try:
        return cls.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: {e}") from e


def load_env_config(name_or_path: Union[str, Path]) -> EnvConfig:
    from .config import CONFIGS_DIR

    p = Path(name_or_path)
    if not p.suffix:
        p = CONFIGS_DIR / f"{name_or_path}.yaml"
    return load_yaml(EnvConfig, p)


def params_gap_fields(target: EnvParams, ranges: RandomizationRanges, source: EnvParams) -> List[str]:
    """Fields where the target sits outside, or on the edge of, the source distribution."""
    out = []
    for name in RANDOMIZABLE_FIELDS:
        value = getattr(target, name)
        if name in ranges.ranges:
            lo, hi = ranges.ranges[name]
            if value <= lo or value >= hi:
                out.append(name)
        elif value != getattr(source, name):
            out.append(name)
    if target.terrain != source.terrain:
        out.append("terrain")
    return out
