# app/composite.py
# Combined task/protect policy with hysteresis mode switching, and the two-phase
# protective threshold search run in the target environment.

import csv
import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .env_config import EnvParams
from .envcore import ProtectiveEnv
from .errors import AdaptationError, ConfigurationError, ContractViolation
from .ppo import GaussianPolicy

logger = logging.getLogger(__name__)

ActFn = Callable[[np.ndarray], np.ndarray]
Estimator = Callable[[np.ndarray], float]
# threshold pair -> (mean return, unsafe)
Evaluator = Callable[["ThresholdPair"], Tuple[float, bool]]

GRID_DECIMALS = 10


class Mode(str, enum.Enum):
    TASK = "task"
    PROTECT = "protect"


class ThresholdPair(BaseModel):
    model_config = ConfigDict(frozen=True)

    kappa_task: float = 1.0
    kappa_protect: float = 1.0

    @field_validator("kappa_task", "kappa_protect")
    @classmethod
    def _unit(cls, v: float) -> float:
        if not 0.0 <= v <= 1.0:
            raise ValueError("thresholds must lie in [0, 1]")
        return v

    @model_validator(mode="after")
    def _band(self) -> "ThresholdPair":
        if self.kappa_protect < self.kappa_task:
            raise ValueError("kappa_protect must be >= kappa_task")
        return self


class AdaptConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    delta: float = 0.1
    kappa_min: float = 0.1
    eval_episodes: int = 3
    unsafe_definition: Literal["any_episode", "fraction"] = "any_episode"
    unsafe_fraction: float = 0.5

    @field_validator("delta")
    @classmethod
    def _delta(cls, v: float) -> float:
        if not 0.0 < v < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        return v

    @field_validator("kappa_min")
    @classmethod
    def _kappa_min(cls, v: float) -> float:
        if not 0.0 <= v < 1.0:
            raise ValueError("kappa_min must lie in [0, 1)")
        return v

    @field_validator("eval_episodes")
    @classmethod
    def _episodes(cls, v: int) -> int:
        if v < 1:
            raise ValueError("eval_episodes must be >= 1")
        return v


# ---------------------------
# hysteresis switching
# ---------------------------

def update_mode(mode: Mode, psi_value: float, thresholds: ThresholdPair) -> Mode:
    if mode is Mode.TASK and psi_value < thresholds.kappa_task:
        return Mode.PROTECT
    if mode is Mode.PROTECT and psi_value > thresholds.kappa_protect:
        return Mode.TASK
    return mode


def combined_act(
    observation: np.ndarray,
    mode: Mode,
    thresholds: ThresholdPair,
    psi_value: float,
    pi_task: ActFn,
    pi_protect: ActFn,
) -> Tuple[np.ndarray, Mode]:
    """Switch mode on the current psi first, then act with the active policy."""
    if not 0.0 <= psi_value <= 1.0:
        raise ContractViolation(f"psi must lie in [0, 1], got {psi_value}")
    mode = update_mode(mode, psi_value, thresholds)
    policy = pi_task if mode is Mode.TASK else pi_protect
    return policy(observation), mode


class CombinedPolicy:
    """Task and protective policies behind one act(); carries the current mode."""

    def __init__(
        self,
        pi_task: ActFn,
        pi_protect: ActFn,
        estimator: Estimator,
        thresholds: ThresholdPair = ThresholdPair(),
        mode: Mode = Mode.TASK,
    ):
        self.pi_task = pi_task
        self.pi_protect = pi_protect
        self.estimator = estimator
        self.thresholds = thresholds
        self.mode = mode
        self.last_psi: Optional[float] = None

    @classmethod
    def from_policies(
        cls,
        pi_task: GaussianPolicy,
        pi_protect: GaussianPolicy,
        estimator: Estimator,
        thresholds: ThresholdPair = ThresholdPair(),
    ) -> "CombinedPolicy":
        return cls(pi_task.mean_action, pi_protect.mean_action, estimator, thresholds)

    def with_thresholds(self, thresholds: ThresholdPair) -> "CombinedPolicy":
        return CombinedPolicy(self.pi_task, self.pi_protect, self.estimator, thresholds)

    def reset(self) -> None:
        self.mode = Mode.TASK
        self.last_psi = None

    def act(self, observation: np.ndarray) -> np.ndarray:
        psi = float(np.clip(self.estimator(observation), 0.0, 1.0))
        action, self.mode = combined_act(observation, self.mode, self.thresholds, psi, self.pi_task, self.pi_protect)
        self.last_psi = psi
        return action

    __call__ = act


# ---------------------------
# evaluation
# ---------------------------

@dataclass
class EpisodeLog:
    observations: List[np.ndarray] = field(default_factory=list)
    modes: List[Mode] = field(default_factory=list)
    psi: List[float] = field(default_factory=list)
    rewards: List[float] = field(default_factory=list)
    unsafe: bool = False

    def __len__(self) -> int:
        return len(self.modes)

    @property
    def total_reward(self) -> float:
        return float(np.sum(self.rewards))


@dataclass
class CombinedEvaluation:
    mean_return: float
    unsafe: bool
    logs: List[EpisodeLog]

    @property
    def unsafe_episodes(self) -> int:
        return sum(log.unsafe for log in self.logs)


def evaluate_combined(
    env_factory: Callable[[], ProtectiveEnv],
    policy: CombinedPolicy,
    episodes: int,
    rng: np.random.Generator,
    params: Optional[EnvParams] = None,
    unsafe_definition: str = "any_episode",
    unsafe_fraction: float = 0.5,
    horizon: Optional[int] = None,
) -> CombinedEvaluation:
    if episodes < 1:
        raise ContractViolation("episodes must be >= 1")
    env = env_factory()
    if params is not None:
        env.set_params(params)
    logs: List[EpisodeLog] = []
    for _ in range(episodes):
        policy.reset()
        obs, _ = env.reset(seed=int(rng.integers(2**31 - 1)))
        log = EpisodeLog()
        for _ in range(horizon or env.horizon):
            action = policy.act(obs)
            log.observations.append(obs)
            log.modes.append(policy.mode)
            log.psi.append(policy.last_psi)
            res = env.transition(action)
            log.rewards.append(res.reward)
            obs = res.next_observation
            if res.is_terminal:
                log.unsafe = not res.is_safe
                break
        logs.append(log)

    flags = [log.unsafe for log in logs]
    if unsafe_definition == "any_episode":
        unsafe = any(flags)
    elif unsafe_definition == "fraction":
        unsafe = float(np.mean(flags)) > unsafe_fraction
    else:
        raise ConfigurationError(f"unknown unsafe definition '{unsafe_definition}'")
    return CombinedEvaluation(mean_return=float(np.mean([l.total_reward for l in logs])), unsafe=unsafe, logs=logs)


# ---------------------------
# protective adaptation
# ---------------------------

@dataclass(frozen=True)
class Trial:
    phase: int
    kappa_task: float
    kappa_protect: float
    mean_return: float
    unsafe: bool


@dataclass
class AdaptResult:
    thresholds: ThresholdPair
    best_return: float
    unsafe_trials: int
    trace: List[Trial]
    estimator: str = "osse"


def _grid(k: int, delta: float) -> float:
    return round(1.0 - k * delta, GRID_DECIMALS)


def _revert(kappa: float, delta: float) -> float:
    return min(1.0, round(kappa + delta, GRID_DECIMALS))


def protective_adaptation(evaluate: Evaluator, config: AdaptConfig, estimator: str = "osse") -> AdaptResult:
    """Two-phase decreasing threshold search; at most one unsafe trial per phase.

    Phase 1 lowers kappa_task from 1 (kappa_protect = 1) while it stays above
    kappa_min, stepping back by delta after an unsafe trial. Phase 2 fixes the
    best kappa_task and lowers kappa_protect from 1 while it is >= kappa_task.
    Only safe trials can become the best; ties keep the earlier trial.
    """
    trace: List[Trial] = []
    best_return = -np.inf
    best_task, best_protect = 1.0, 1.0

    def run(phase: int, pair: ThresholdPair) -> Trial:
        try:
            mean_return, unsafe = evaluate(pair)
        except AdaptationError:
            raise
        except Exception as e:
            raise AdaptationError(f"evaluation failed at {pair.model_dump()}: {e}", trace=list(trace)) from e
        trial = Trial(phase, pair.kappa_task, pair.kappa_protect, float(mean_return), bool(unsafe))
        trace.append(trial)
        logger.info(
            "adapt phase %d: kappa_task=%.3f kappa_protect=%.3f return=%.2f unsafe=%s",
            phase, trial.kappa_task, trial.kappa_protect, trial.mean_return, trial.unsafe,
        )
        return trial

    k = 0
    kappa_task = _grid(k, config.delta)
    while kappa_task > config.kappa_min:
        trial = run(1, ThresholdPair(kappa_task=kappa_task, kappa_protect=1.0))
        if trial.unsafe:
            kappa_task = _revert(kappa_task, config.delta)
            break
        if trial.mean_return > best_return:
            best_return, best_task = trial.mean_return, kappa_task
        k += 1
        kappa_task = _grid(k, config.delta)

    j = 0
    kappa_protect = _grid(j, config.delta)
    while kappa_protect >= best_task:
        trial = run(2, ThresholdPair(kappa_task=best_task, kappa_protect=kappa_protect))
        if trial.unsafe:
            kappa_protect = _revert(kappa_protect, config.delta)
            break
        if trial.mean_return > best_return:
            best_return, best_protect = trial.mean_return, kappa_protect
        j += 1
        kappa_protect = _grid(j, config.delta)

    unsafe_trials = sum(t.unsafe for t in trace)
    return AdaptResult(
        thresholds=ThresholdPair(kappa_task=best_task, kappa_protect=best_protect),
        best_return=float(best_return),
        unsafe_trials=unsafe_trials,
        trace=trace,
        estimator=estimator,
    )


def adapt_thresholds(
    pi_task: GaussianPolicy,
    pi_protect: GaussianPolicy,
    psi: Estimator,
    env_factory: Callable[[], ProtectiveEnv],
    config: AdaptConfig,
    rng: np.random.Generator,
    params: Optional[EnvParams] = None,
    estimator: str = "osse",
) -> AdaptResult:
    """Runs the threshold search against evaluate_combined in the target environment."""
    policy = CombinedPolicy.from_policies(pi_task, pi_protect, psi)

    def evaluate(pair: ThresholdPair) -> Tuple[float, bool]:
        ev = evaluate_combined(
            env_factory, policy.with_thresholds(pair), config.eval_episodes, rng, params=params,
            unsafe_definition=config.unsafe_definition, unsafe_fraction=config.unsafe_fraction,
        )
        return ev.mean_return, ev.unsafe

    result = protective_adaptation(evaluate, config, estimator=estimator)
    logger.info(
        "adaptation done: kappa_task=%.3f kappa_protect=%.3f R*=%.2f unsafe trials=%d",
        result.thresholds.kappa_task, result.thresholds.kappa_protect, result.best_return, result.unsafe_trials,
    )
    return result


# ---------------------------
# traces
# ---------------------------

@dataclass(frozen=True)
class SelectionRow:
    observation: Tuple[float, ...]
    mode: Mode


def selection_trace(logs: Union[EpisodeLog, Sequence[EpisodeLog]]) -> List[SelectionRow]:
    """Per-step (observation, mode) rows, aligned with the rollout."""
    if isinstance(logs, EpisodeLog):
        logs = [logs]
    rows = []
    for log in logs:
        for obs, mode in zip(log.observations, log.modes):
            rows.append(SelectionRow(observation=tuple(float(v) for v in obs), mode=mode))
    return rows


def write_selection_csv(rows: Sequence[SelectionRow], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dim = len(rows[0].observation) if rows else 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow([f"obs_{i}" for i in range(dim)] + ["mode"])
        for r in rows:
            w.writerow([repr(v) for v in r.observation] + [r.mode.value])
    return path


def read_selection_csv(path: Union[str, Path]) -> List[SelectionRow]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"selection trace not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        next(reader)
        return [SelectionRow(observation=tuple(float(v) for v in r[:-1]), mode=Mode(r[-1])) for r in reader]


ADAPT_TRACE_COLUMNS = ["trial", "phase", "kappa_task", "kappa_protect", "mean_return", "unsafe", "estimator"]


def write_adapt_trace_csv(result: AdaptResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(ADAPT_TRACE_COLUMNS)
        for i, t in enumerate(result.trace):
            w.writerow([i, t.phase, repr(t.kappa_task), repr(t.kappa_protect), repr(t.mean_return), int(t.unsafe), result.estimator])
    return path


def read_adapt_trace_csv(path: Union[str, Path]) -> List[Trial]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"adaptation trace not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        return [
            Trial(int(r["phase"]), float(r["kappa_task"]), float(r["kappa_protect"]), float(r["mean_return"]), r["unsafe"] == "1")
            for r in csv.DictReader(f)
        ]
