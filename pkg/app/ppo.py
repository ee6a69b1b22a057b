# app/ppo.py
# Proximal policy optimization on top of app.neural: Gaussian policies, rollout
# collection under per-episode domain randomization, GAE, clipped-surrogate updates.

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from .env_config import EnvParams, RandomizationRanges
from .envcore import ProtectiveEnv, StepResult, sample_params
from .errors import ContractViolation, IntegrationError, TrainingError
from .neural import (
    Mlp,
    OptimState,
    adam_state,
    backward,
    forward,
    forward_cache,
    init_mlp,
    mlp_from_tensors,
    mlp_tensors,
    save_mlp,
    optimizer_step,
    read_checkpoint,
    write_checkpoint,
)

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
DEFAULT_HORIZON = 1000

RewardFn = Callable[[np.ndarray, np.ndarray, StepResult], float]
ActFn = Callable[[np.ndarray], np.ndarray]


class PpoConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    epochs: int = 4
    minibatch_size: int = 256
    steps_per_batch: int = 4096
    iterations: int = 50
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    lr: float = 3e-4
    value_lr: float = 1e-3
    hidden: Tuple[int, ...] = (64, 64)
    value_hidden: Tuple[int, ...] = (64, 64)
    init_log_std: float = -0.5

    @field_validator("gamma", "gae_lambda")
    @classmethod
    def _unit(cls, v: float) -> float:
        if not 0.0 < v <= 1.0:
            raise ValueError("must lie in (0, 1]")
        return v

    @field_validator("clip_ratio")
    @classmethod
    def _clip(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("clip_ratio must be > 0")
        return v

    @field_validator("epochs", "minibatch_size", "steps_per_batch")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("must be > 0")
        return v

    @field_validator("iterations")
    @classmethod
    def _iterations(cls, v: int) -> int:
        if v < 0:
            raise ValueError("iterations must be >= 0")
        return v


# ---------------------------
# policy
# ---------------------------

def gaussian_log_prob(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    z = (actions - mean) / np.exp(log_std)
    return -0.5 * np.sum(z * z + 2.0 * log_std + LOG_2PI, axis=-1)


@dataclass
class GaussianPolicy:
    mean_net: Mlp
    log_std: np.ndarray

    @property
    def params(self) -> List[np.ndarray]:
        return self.mean_net.params + [self.log_std]

    def with_params(self, params: Sequence[np.ndarray]) -> "GaussianPolicy":
        return GaussianPolicy(mean_net=self.mean_net.with_params(params[:-1]), log_std=np.array(params[-1]))

    def copy(self) -> "GaussianPolicy":
        return self.with_params(self.params)

    def mean_action(self, observation: np.ndarray) -> np.ndarray:
        return forward(self.mean_net, observation)

    def sample(self, observation: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, float]:
        mean = self.mean_action(observation)
        action = mean + np.exp(self.log_std) * rng.standard_normal(mean.shape)
        return action, float(gaussian_log_prob(mean, self.log_std, action))

    def log_prob(self, observations: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return gaussian_log_prob(self.mean_action(observations), self.log_std, actions)


def init_policy(obs_dim: int, act_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (64, 64), log_std: float = -0.5) -> GaussianPolicy:
    net = init_mlp([obs_dim, *hidden, act_dim], rng, scheme="orthogonal", final_scale=0.01)
    return GaussianPolicy(mean_net=net, log_std=np.full(act_dim, float(log_std)))


def init_value(obs_dim: int, rng: np.random.Generator, hidden: Sequence[int] = (64, 64)) -> Mlp:
    return init_mlp([obs_dim, *hidden, 1], rng, scheme="fan_in")


def save_policy(policy: GaussianPolicy, stem: Union[str, Path]) -> Path:
    tensors = mlp_tensors(policy.mean_net) + [("log_std", policy.log_std)]
    return write_checkpoint(stem, "gaussian_policy", tensors, {"layer_sizes": policy.mean_net.layer_sizes})


def load_policy(stem: Union[str, Path]) -> GaussianPolicy:
    _, tensors = read_checkpoint(stem, "gaussian_policy")
    return GaussianPolicy(mean_net=mlp_from_tensors(tensors), log_std=tensors["log_std"])


# ---------------------------
# rollouts
# ---------------------------

@dataclass
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    log_probs: np.ndarray
    terminal: bool = False
    unsafe: bool = False
    bootstrap_value: float = 0.0
    infos: List[Dict[str, float]] = field(default_factory=list)
    params: Optional[EnvParams] = None

    def __post_init__(self) -> None:
        n = len(self.rewards)
        for name in ("observations", "actions", "values", "log_probs"):
            if len(getattr(self, name)) != n:
                raise ContractViolation(f"trajectory field '{name}' has length {len(getattr(self, name))}, expected {n}")
        if self.unsafe and not self.terminal:
            raise ContractViolation("an unsafe trajectory must end in a terminal step")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))


def collect_rollouts(
    policy: GaussianPolicy,
    env_factory: Callable[[], ProtectiveEnv],
    randomization: RandomizationRanges,
    steps: int,
    rng: np.random.Generator,
    value_net: Optional[Mlp] = None,
    reward_fn: Optional[RewardFn] = None,
    init_buffer: Any = None,
    deterministic: bool = False,
    horizon: Optional[int] = None,
) -> List[Trajectory]:
    """Episodes under freshly sampled EnvParams until `steps` control steps are used."""
    if steps <= 0:
        raise ContractViolation("steps must be > 0")
    env = env_factory()
    horizon = horizon or env.horizon
    nominal = env.config.params
    options = {"seed_buffer": init_buffer} if init_buffer is not None else None
    out: List[Trajectory] = []
    remaining = steps
    while remaining > 0:
        params = sample_params(randomization, rng, defaults=nominal)
        env.set_params(params)
        obs, _ = env.reset(seed=int(rng.integers(2**31 - 1)), options=options)
        o_l, a_l, r_l, v_l, lp_l, info_l = [], [], [], [], [], []
        terminal = unsafe = False
        for _ in range(min(horizon, remaining)):
            if deterministic:
                action = policy.mean_action(obs)
                logp = float(gaussian_log_prob(action, policy.log_std, action))
            else:
                action, logp = policy.sample(obs, rng)
            value = float(forward(value_net, obs)[0]) if value_net is not None else 0.0
            try:
                res = env.transition(action)
            except IntegrationError as e:
                raise IntegrationError(
                    f"episode {len(out)} (step {len(r_l)}, params {params.model_dump()}): {e}",
                    state=e.state, action=e.action,
                ) from e
            o_l.append(obs)
            a_l.append(action)
            r_l.append(reward_fn(obs, action, res) if reward_fn is not None else res.reward)
            v_l.append(value)
            lp_l.append(logp)
            info_l.append(res.info)
            obs = res.next_observation
            if res.is_terminal:
                terminal, unsafe = True, not res.is_safe
                break
        bootstrap = 0.0
        if not terminal and value_net is not None:
            bootstrap = float(forward(value_net, obs)[0])
        out.append(Trajectory(
            observations=np.array(o_l), actions=np.array(a_l), rewards=np.array(r_l, dtype=float),
            values=np.array(v_l, dtype=float), log_probs=np.array(lp_l, dtype=float),
            terminal=terminal, unsafe=unsafe, bootstrap_value=bootstrap, infos=info_l, params=params,
        ))
        remaining -= len(r_l)
    return out


def compute_gae(traj: Trajectory, gamma: float, lam: float, bootstrap_value: Optional[float] = None) -> Tuple[np.ndarray, np.ndarray]:
    boot = traj.bootstrap_value if bootstrap_value is None else bootstrap_value
    values = np.asarray(traj.values, dtype=float)
    next_values = np.append(values[1:], boot)
    deltas = np.asarray(traj.rewards, dtype=float) + gamma * next_values - values
    adv = np.zeros_like(deltas)
    running = 0.0
    for t in reversed(range(len(deltas))):
        running = deltas[t] + gamma * lam * running
        adv[t] = running
    return adv, adv + values


# ---------------------------
# update
# ---------------------------

@dataclass
class PpoOptim:
    policy: OptimState
    value: OptimState


def make_optim(policy: GaussianPolicy, value_net: Mlp, config: PpoConfig) -> PpoOptim:
    return PpoOptim(policy=adam_state(policy.params, lr=config.lr), value=adam_state(value_net.params, lr=config.value_lr))


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    if adv.size <= 1:
        return adv
    centered = adv - adv.mean()
    std = centered.std()
    return centered / std if std > 0 else centered


def ppo_update(
    policy: GaussianPolicy,
    value_net: Mlp,
    batch: Sequence[Trajectory],
    config: PpoConfig,
    rng: np.random.Generator,
    optim: Optional[PpoOptim] = None,
) -> Tuple[GaussianPolicy, Mlp, Dict[str, float]]:
    if not batch:
        raise ContractViolation("ppo_update needs a nonempty batch")
    optim = optim or make_optim(policy, value_net, config)

    obs = np.concatenate([t.observations for t in batch])
    acts = np.concatenate([t.actions for t in batch])
    old_logp = np.concatenate([t.log_probs for t in batch])
    gae = [compute_gae(t, config.gamma, config.gae_lambda) for t in batch]
    adv = normalize_advantages(np.concatenate([g[0] for g in gae]))
    returns = np.concatenate([g[1] for g in gae])
    n = len(obs)

    initial_ratio = np.exp(policy.log_prob(obs, acts) - old_logp)
    diag: Dict[str, float] = {
        "initial_ratio_max_dev": float(np.max(np.abs(initial_ratio - 1.0))),
        "samples": float(n),
    }
    sums = {"policy_loss": 0.0, "value_loss": 0.0, "approx_kl": 0.0, "clip_fraction": 0.0}
    n_mb = 0
    eps = config.clip_ratio
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = perm[start:start + config.minibatch_size]
            m = len(idx)
            o, a, A, R, lp_old = obs[idx], acts[idx], adv[idx], returns[idx], old_logp[idx]

            mean, cache = forward_cache(policy.mean_net, o)
            std = np.exp(policy.log_std)
            logp = gaussian_log_prob(mean, policy.log_std, a)
            ratio = np.exp(logp - lp_old)
            surr1 = ratio * A
            surr2 = np.clip(ratio, 1.0 - eps, 1.0 + eps) * A
            policy_loss = -float(np.mean(np.minimum(surr1, surr2)))
            active = surr1 <= surr2
            dlogp = -(A * ratio * active) / m

            z = (a - mean) / std
            grad_mean = dlogp[:, None] * z / std
            grad_log_std = np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - config.entropy_coef
            policy_grads = backward(policy.mean_net, o, grad_mean, cache) + [grad_log_std]

            v, vcache = forward_cache(value_net, o)
            err = v[:, 0] - R
            value_loss = config.value_coef * float(np.mean(err * err))
            value_grads = backward(value_net, o, (2.0 * config.value_coef * err / m)[:, None], vcache)

            if not (np.isfinite(policy_loss) and np.isfinite(value_loss)):
                raise TrainingError(
                    f"non-finite loss (policy={policy_loss}, value={value_loss})",
                    diagnostics={**diag, "policy_loss": policy_loss, "value_loss": value_loss},
                )

            policy = policy.with_params(optimizer_step(policy.params, policy_grads, optim.policy))
            value_net = value_net.with_params(optimizer_step(value_net.params, value_grads, optim.value))

            sums["policy_loss"] += policy_loss
            sums["value_loss"] += value_loss
            sums["approx_kl"] += float(np.mean(lp_old - logp))
            sums["clip_fraction"] += float(np.mean(np.abs(ratio - 1.0) > eps))
            n_mb += 1

    for k, v in sums.items():
        diag[k] = v / max(n_mb, 1)
    diag["entropy"] = float(np.sum(policy.log_std) + 0.5 * len(policy.log_std) * (1.0 + LOG_2PI))
    return policy, value_net, diag


# ---------------------------
# training loop
# ---------------------------

@dataclass
class TrainResult:
    policy: GaussianPolicy
    value_net: Mlp
    history: List[Dict[str, float]] = field(default_factory=list)
    best_return: float = -math.inf


METRIC_COLUMNS = [
    "iteration", "mean_return", "mean_length", "unsafe_fraction",
    "policy_loss", "value_loss", "approx_kl", "clip_fraction", "entropy",
]


def write_metrics_csv(history: Sequence[Dict[str, float]], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in history:
            w.writerow({k: (repr(float(v)) if k != "iteration" else int(v)) for k, v in row.items() if k in METRIC_COLUMNS})
    return path


def train_policy(
    env_factory: Callable[[], ProtectiveEnv],
    config: PpoConfig,
    rng: np.random.Generator,
    reward_fn: Optional[RewardFn] = None,
    randomization: Optional[RandomizationRanges] = None,
    init_buffer: Any = None,
    out_dir: Optional[Union[str, Path]] = None,
    name: str = "policy",
) -> TrainResult:
    """collect -> GAE -> update for config.iterations; keeps the best-by-mean-return snapshot."""
    randomization = randomization or RandomizationRanges()
    sample_env = env_factory()
    policy = init_policy(sample_env.observation_dim, sample_env.action_dim, rng, hidden=config.hidden, log_std=config.init_log_std)
    value_net = init_value(sample_env.observation_dim, rng, hidden=config.value_hidden)
    optim = make_optim(policy, value_net, config)
    result = TrainResult(policy=policy.copy(), value_net=value_net.copy())

    for it in range(config.iterations):
        batch = collect_rollouts(
            policy, env_factory, randomization, config.steps_per_batch, rng,
            value_net=value_net, reward_fn=reward_fn, init_buffer=init_buffer,
        )
        mean_return = float(np.mean([t.total_reward for t in batch]))
        stats = {
            "iteration": it,
            "mean_return": mean_return,
            "mean_length": float(np.mean([len(t) for t in batch])),
            "unsafe_fraction": float(np.mean([t.unsafe for t in batch])),
        }
        if mean_return > result.best_return:
            result.best_return = mean_return
            result.policy, result.value_net = policy.copy(), value_net.copy()

        policy, value_net, diag = ppo_update(policy, value_net, batch, config, rng, optim)
        stats.update(diag)
        result.history.append(stats)
        logger.info(
            "%s it=%d return=%.2f len=%.1f unsafe=%.2f kl=%.4f",
            name, it, stats["mean_return"], stats["mean_length"], stats["unsafe_fraction"], diag["approx_kl"],
        )

    if out_dir is not None:
        out = Path(out_dir)
        write_metrics_csv(result.history, out / f"{name}_metrics.csv")
        save_policy(result.policy, out / f"{name}")
        save_mlp(result.value_net, out / f"{name}_value")
    return result


# ---------------------------
# evaluation
# ---------------------------

@dataclass
class EpisodeStats:
    total_reward: float
    length: int
    unsafe: bool


def run_episode(act: ActFn, env: ProtectiveEnv, seed: int, horizon: Optional[int] = None) -> EpisodeStats:
    obs, _ = env.reset(seed=seed)
    total, length, unsafe = 0.0, 0, False
    for _ in range(horizon or env.horizon):
        res = env.transition(act(obs))
        total += res.reward
        length += 1
        obs = res.next_observation
        if res.is_terminal:
            unsafe = not res.is_safe
            break
    return EpisodeStats(total_reward=total, length=length, unsafe=unsafe)


def evaluate_policy(
    act: ActFn,
    env_factory: Callable[[], ProtectiveEnv],
    episodes: int,
    rng: np.random.Generator,
    params: Optional[EnvParams] = None,
    horizon: Optional[int] = None,
) -> List[EpisodeStats]:
    env = env_factory()
    if params is not None:
        env.set_params(params)
    return [run_episode(act, env, int(rng.integers(2**31 - 1)), horizon) for _ in range(episodes)]


def random_policy(act_dim: int, rng: np.random.Generator) -> ActFn:
    return lambda obs: rng.uniform(-1.0, 1.0, size=act_dim)
