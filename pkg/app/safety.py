# app/safety.py
# Protective-policy training and the one-step safety estimator (OSSE):
# seed-state collection, protect reward, labelled dataset construction, ensemble fit.

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from .env_config import RandomizationRanges
from .envcore import ProtectiveEnv, StepResult, sample_params
from .errors import CapabilityError, ConfigurationError, ContractViolation, EmptyBufferError
from .neural import (
    Ensemble,
    Mlp,
    adam_state,
    backward,
    ensemble_predict,
    ensemble_spread,
    forward,
    forward_cache,
    init_ensemble,
    load_ensemble,
    optimizer_step,
    read_checkpoint,
    save_ensemble,
    write_checkpoint,
)
from .ppo import GaussianPolicy, PpoConfig, TrainResult, train_policy

logger = logging.getLogger(__name__)

# Hard defaults
DEFAULT_SEED_ROLLOUTS = 50
DEFAULT_PROTECT_ROLLOUTS = 200
NOISE_FRACTION = 0.3


class ProtectRewardWeights(BaseModel):
    model_config = ConfigDict(frozen=True)

    w_alive: float = 1.0
    r_alive: float = 4.0
    w_action: float = 0.3
    w_task: float = 0.2

    @model_validator(mode="after")
    def _weights(self) -> "ProtectRewardWeights":
        if not self.w_alive > 0:
            raise ValueError("w_alive must be > 0")
        if self.w_action < 0 or self.w_task < 0:
            raise ValueError("w_action and w_task must be >= 0")
        return self


def protect_reward(state, action: Sequence[float], task_reward_value: float, w: ProtectRewardWeights) -> float:
    """Alive-dominated reward: w_alive*r_alive - w_action*|a|^2 + w_task*min(R_task, 0)."""
    a = np.asarray(action, dtype=float)
    return w.w_alive * w.r_alive - w.w_action * float(a @ a) + w.w_task * min(float(task_reward_value), 0.0)


def protect_reward_fn(w: ProtectRewardWeights) -> Callable[[np.ndarray, np.ndarray, StepResult], float]:
    def fn(obs: np.ndarray, action: np.ndarray, res: StepResult) -> float:
        return protect_reward(obs, np.clip(action, -1.0, 1.0), res.reward, w)

    return fn


def value_normalizer(w: ProtectRewardWeights, gamma: float, horizon: int) -> float:
    """Discounted return of a policy that collects only the alive term for the full horizon."""
    per_step = w.w_alive * w.r_alive
    if gamma == 1.0:
        return per_step * horizon
    return per_step * (1.0 - gamma ** horizon) / (1.0 - gamma)


# ---------------------------
# seed states
# ---------------------------

@dataclass
class SeedStateBuffer:
    states: np.ndarray
    noise_scale: float = 0.0

    def __len__(self) -> int:
        return len(self.states)

    def save(self, stem: Union[str, Path]) -> Path:
        return write_checkpoint(stem, "seed_buffer", [("states", self.states)], {"noise_scale": self.noise_scale})

    @classmethod
    def load(cls, stem: Union[str, Path]) -> "SeedStateBuffer":
        header, tensors = read_checkpoint(stem, "seed_buffer")
        return cls(states=tensors["states"], noise_scale=float(header["meta"]["noise_scale"]))


def default_noise_scale(policy: GaussianPolicy) -> float:
    return NOISE_FRACTION * float(np.mean(np.exp(policy.log_std)))


def collect_seed_states(
    pi_task: GaussianPolicy,
    env_factory: Callable[[], ProtectiveEnv],
    noise_scale: float,
    rollouts: int,
    rng: np.random.Generator,
    randomization: Optional[RandomizationRanges] = None,
    deterministic: bool = False,
) -> SeedStateBuffer:
    """Every safe state reached by noisy task-policy rollouts."""
    if rollouts <= 0:
        raise ContractViolation("rollouts must be > 0")
    if noise_scale < 0:
        raise ContractViolation("noise_scale must be >= 0")
    env = env_factory()
    nominal = env.config.params
    states: List[np.ndarray] = []
    for _ in range(rollouts):
        if randomization is not None:
            env.set_params(sample_params(randomization, rng, defaults=nominal))
        obs, _ = env.reset(seed=int(rng.integers(2**31 - 1)))
        for _ in range(env.horizon):
            if deterministic:
                action = pi_task.mean_action(obs)
            else:
                action, _ = pi_task.sample(obs, rng)
            if noise_scale > 0:
                action = action + noise_scale * rng.standard_normal(action.shape)
            res = env.transition(action)
            if not res.is_safe:
                break
            states.append(env.get_state())
            obs = res.next_observation
            if res.is_terminal:
                break
    if not states:
        raise EmptyBufferError("the task policy never survived a single step; seed buffer is empty")
    logger.info("collected %d seed states from %d rollouts (noise %.3f)", len(states), rollouts, noise_scale)
    return SeedStateBuffer(states=np.array(states), noise_scale=noise_scale)


def train_protect(
    env_factory: Callable[[], ProtectiveEnv],
    buffer: SeedStateBuffer,
    weights: ProtectRewardWeights,
    config: PpoConfig,
    rng: np.random.Generator,
    randomization: Optional[RandomizationRanges] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """PPO on the protect reward, with episodes starting from buffer-drawn states."""
    if len(buffer) == 0:
        raise EmptyBufferError("train_protect needs a nonempty seed buffer")
    return train_policy(
        env_factory, config, rng,
        reward_fn=protect_reward_fn(weights),
        randomization=randomization,
        init_buffer=buffer,
        out_dir=out_dir,
        name="protect_policy",
    )


# ---------------------------
# OSSE dataset
# ---------------------------

@dataclass
class OsseDataset:
    inputs: np.ndarray
    labels: np.ndarray
    v_max: float
    states: np.ndarray = field(default_factory=lambda: np.empty((0, 0)))

    def __post_init__(self) -> None:
        if len(self.inputs) != len(self.labels):
            raise ContractViolation("inputs and labels differ in count")
        if self.states.size and len(self.states) != len(self.labels):
            raise ContractViolation("states and labels differ in count")
        if len(self.labels) and (self.labels.min() < 0.0 or self.labels.max() > 1.0):
            raise ContractViolation("labels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        n_in = self.inputs.shape[1] if self.inputs.ndim == 2 else 0
        n_st = self.states.shape[1] if self.states.ndim == 2 and self.states.size else 0
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# v_max={self.v_max!r}\n")
            w = csv.writer(f)
            w.writerow([f"obs_{i}" for i in range(n_in)] + [f"state_{j}" for j in range(n_st)] + ["label"])
            for k in range(len(self)):
                row = [repr(float(v)) for v in self.inputs[k]]
                if n_st:
                    row += [repr(float(v)) for v in self.states[k]]
                w.writerow(row + [repr(float(self.labels[k]))])
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path]) -> "OsseDataset":
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"dataset not found: {path}")
        with open(path, newline="", encoding="utf-8") as f:
            first = f.readline().strip()
            if not first.startswith("# v_max="):
                raise ConfigurationError(f"{path}: missing v_max header")
            v_max = float(first.split("=", 1)[1])
            reader = csv.reader(f)
            header = next(reader)
            rows = np.array([[float(v) for v in r] for r in reader], dtype=float).reshape(-1, len(header))
        obs_cols = [i for i, h in enumerate(header) if h.startswith("obs_")]
        state_cols = [i for i, h in enumerate(header) if h.startswith("state_")]
        return cls(
            inputs=rows[:, obs_cols],
            labels=rows[:, header.index("label")],
            v_max=v_max,
            states=rows[:, state_cols] if state_cols else np.empty((0, 0)),
        )


def osse_label(
    env: ProtectiveEnv,
    state: np.ndarray,
    pi_task: GaussianPolicy,
    v_protect: Mlp,
    v_max: float,
) -> Tuple[np.ndarray, float]:
    """Restore `state`, take one deterministic task action, score the result with V_protect."""
    try:
        env.set_state(state)
        obs = env.observation()
    except NotImplementedError as e:
        raise CapabilityError(f"{type(env).__name__} cannot restore states") from e
    res = env.transition(pi_task.mean_action(obs))
    if not res.is_safe:
        return obs, 0.0
    value = float(forward(v_protect, res.next_observation)[0])
    return obs, float(np.clip(value / v_max, 0.0, 1.0))


def build_osse_dataset(
    pi_task: GaussianPolicy,
    pi_protect: GaussianPolicy,
    v_protect: Mlp,
    env_factory: Callable[[], ProtectiveEnv],
    buffer: SeedStateBuffer,
    rollouts: int,
    rng: np.random.Generator,
    v_max: float,
    horizon: Optional[int] = None,
) -> OsseDataset:
    if rollouts <= 0:
        raise ContractViolation("rollouts must be > 0")
    if len(buffer) == 0:
        raise EmptyBufferError("build_osse_dataset needs a nonempty seed buffer")
    env = env_factory()
    horizon = horizon or env.horizon

    # protective rollouts from buffer-drawn starts fill B
    visited: List[np.ndarray] = []
    for _ in range(rollouts):
        try:
            obs, _ = env.reset(seed=int(rng.integers(2**31 - 1)), options={"seed_buffer": buffer})
            visited.append(env.get_state())
        except NotImplementedError as e:
            raise CapabilityError(f"{type(env).__name__} cannot expose its state") from e
        for _ in range(horizon):
            action, _ = pi_protect.sample(obs, rng)
            res = env.transition(action)
            if res.is_terminal:
                break
            visited.append(env.get_state())
            obs = res.next_observation

    # one task step from each buffered state
    inputs, labels = [], []
    for state in visited:
        obs, label = osse_label(env, state, pi_task, v_protect, v_max)
        inputs.append(obs)
        labels.append(label)
    logger.info("built OSSE dataset: %d entries, mean label %.3f", len(labels), float(np.mean(labels)))
    return OsseDataset(inputs=np.array(inputs), labels=np.array(labels), v_max=v_max, states=np.array(visited))


# ---------------------------
# OSSE model
# ---------------------------

class OsseTrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    hidden: Tuple[int, ...] = (256, 128, 64)
    members: int = 3
    steps: int = 2000
    minibatch_size: int = 64
    lr: float = 1e-3


@dataclass
class OsseModel:
    ensemble: Ensemble
    v_max: float

    def predict(self, observation: np.ndarray) -> Union[float, np.ndarray]:
        value = np.clip(ensemble_predict(self.ensemble, observation), 0.0, 1.0)
        return float(value) if np.ndim(value) == 0 else value

    def predict_with_spread(self, observation: np.ndarray) -> Tuple[float, float]:
        return float(self.predict(observation)), float(ensemble_spread(self.ensemble, observation))

    def __call__(self, observation: np.ndarray) -> float:
        return float(self.predict(observation))

    def save(self, stem: Union[str, Path]) -> Path:
        return save_ensemble(self.ensemble, stem, {"v_max": self.v_max})

    @classmethod
    def load(cls, stem: Union[str, Path]) -> "OsseModel":
        ens, meta = load_ensemble(stem)
        return cls(ensemble=ens, v_max=float(meta["v_max"]))


def _fit_member(net: Mlp, x: np.ndarray, y: np.ndarray, config: OsseTrainConfig, rng: np.random.Generator) -> Mlp:
    opt = adam_state(net.params, lr=config.lr)
    n = len(x)
    for _ in range(config.steps):
        idx = rng.integers(n, size=min(config.minibatch_size, n))
        out, cache = forward_cache(net, x[idx])
        err = out[:, 0] - y[idx]
        grads = backward(net, x[idx], (2.0 * err / len(idx))[:, None], cache)
        net = net.with_params(optimizer_step(net.params, grads, opt))
    return net


def train_osse(dataset: OsseDataset, rng: np.random.Generator, config: OsseTrainConfig = OsseTrainConfig()) -> OsseModel:
    """Mean-squared regression, one bootstrap resample per ensemble member."""
    if len(dataset) == 0:
        raise EmptyBufferError("cannot fit the safety estimator on an empty dataset")
    x = np.asarray(dataset.inputs, dtype=float)
    y = np.asarray(dataset.labels, dtype=float)
    ens = init_ensemble(x.shape[1], rng, hidden=config.hidden, size=config.members)
    members = []
    for k, net in enumerate(ens.members):
        boot = rng.integers(len(x), size=len(x))
        net = _fit_member(net, x[boot], y[boot], config, rng)
        mse = float(np.mean((forward(net, x)[:, 0] - y) ** 2))
        logger.info("OSSE member %d fit: train mse %.5f", k, mse)
        members.append(net)
    model = OsseModel(ensemble=Ensemble(members=members), v_max=dataset.v_max)
    logger.info("OSSE ensemble spread on training inputs: mean %.4f", float(np.mean(ensemble_spread(model.ensemble, x))))
    return model
