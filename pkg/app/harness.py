# app/harness.py
# Experiment pipeline: task policy -> seed states -> protective policy -> OSSE ->
# threshold adaptation -> target evaluation, plus the DR / DR-RE / NO-OSSE /
# Safe-Bayes baselines. Every stage caches its artifacts under <out>/seed_<seed>/.

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .analysis import HOPPER_FEATURES, NAV_FEATURES, SelectionAnalysis, policy_selection_analysis
from .bayes import BayesOptState, bayes_search
from .composite import (
    AdaptConfig,
    AdaptResult,
    CombinedPolicy,
    ThresholdPair,
    adapt_thresholds,
    evaluate_combined,
    selection_trace,
    write_adapt_trace_csv,
    write_selection_csv,
)
from .config import CONFIGS_DIR, settings
from .env_config import (
    RANDOMIZABLE_FIELDS,
    EnvConfig,
    EnvParams,
    RandomizationRanges,
    load_env_config,
    load_yaml,
    params_gap_fields,
    save_yaml,
)
from .envcore import ProtectiveEnv
from .envs import env_factory
from .errors import ConfigurationError, StageError, ToolkitError
from .neural import Mlp, forward, load_mlp
from .ppo import GaussianPolicy, PpoConfig, load_policy, run_episode, train_policy
from .safety import (
    OsseDataset,
    OsseModel,
    OsseTrainConfig,
    ProtectRewardWeights,
    SeedStateBuffer,
    build_osse_dataset,
    collect_seed_states,
    default_noise_scale,
    train_osse,
    train_protect,
    value_normalizer,
)

logger = logging.getLogger(__name__)

MAX_ROLLOUT_LENGTH = 1000
Method = Literal["ours", "dr", "dr_re", "no_osse", "safe_bayes"]
METHODS: Tuple[str, ...] = ("ours", "dr", "dr_re", "no_osse", "safe_bayes")

# stage ids feed the per-stage seed sequence; stable across resumes
STAGE_IDS = {
    "task": 1,
    "task_dr_re": 2,
    "seed_states": 3,
    "protect": 4,
    "osse_data": 5,
    "osse": 6,
    "adapt": 7,
    "eval": 8,
    "analyze": 9,
}


class TargetSweep(BaseModel):
    model_config = ConfigDict(frozen=True)

    field: str
    values: List[float]

    @field_validator("field")
    @classmethod
    def _field(cls, v: str) -> str:
        if v not in RANDOMIZABLE_FIELDS:
            raise ValueError(f"'{v}' is not a randomizable EnvParams field")
        return v


class ExperimentConfig(BaseModel):
    schema_version: int = 1
    name: str = "experiment"
    env: str = "hopper"
    horizon: Optional[int] = None
    source_randomization: Optional[RandomizationRanges] = None
    target: EnvParams = EnvParams()
    target_sweep: Optional[TargetSweep] = None
    seeds: List[int] = Field(default_factory=lambda: [0])
    method: Method = "ours"
    task_ppo: PpoConfig = PpoConfig()
    protect_ppo: PpoConfig = PpoConfig(value_hidden=(256, 128, 64))
    protect_reward: ProtectRewardWeights = ProtectRewardWeights()
    adapt: AdaptConfig = AdaptConfig()
    osse: OsseTrainConfig = OsseTrainConfig()
    seed_rollouts: int = 50
    protect_rollouts: int = 200
    noise_scale: Optional[float] = None
    eval_rollouts: int = 200
    safe_bayes_budget: int = 20
    dr_re_alive_scale: float = 4.0
    compare_policies: bool = True
    output_dir: str = Field(default_factory=lambda: settings.OUTPUT_DIR)

    @field_validator("seed_rollouts", "protect_rollouts", "eval_rollouts")
    @classmethod
    def _positive(cls, v: int) -> int:
        if v <= 0:
            raise ValueError("rollout counts must be > 0")
        return v

    @field_validator("safe_bayes_budget")
    @classmethod
    def _budget(cls, v: int) -> int:
        if v < 3:
            raise ValueError("safe_bayes_budget must be >= 3")
        return v

    def env_config(self) -> EnvConfig:
        cfg = load_env_config(self.env)
        if self.horizon is not None:
            cfg = cfg.model_copy(update={"horizon": self.horizon})
        return cfg

    def randomization(self, env_cfg: EnvConfig) -> RandomizationRanges:
        return self.source_randomization if self.source_randomization is not None else env_cfg.randomization

    def targets(self) -> List[EnvParams]:
        if self.target_sweep is None:
            return [self.target]
        base = self.target.model_dump()
        return [EnvParams.model_validate({**base, self.target_sweep.field: v}) for v in self.target_sweep.values]

    def check_gap(self, env_cfg: EnvConfig) -> List[str]:
        """Warns when a target sits strictly inside the source distribution."""
        ranges = self.randomization(env_cfg)
        fields: List[str] = []
        for target in self.targets():
            gap = params_gap_fields(target, ranges, env_cfg.params)
            if not gap:
                logger.warning("%s: target %s lies inside the source randomization; no reality gap", self.name, target.model_dump())
            fields += gap
        return sorted(set(fields))


def load_experiment_config(name_or_path: Union[str, Path]) -> ExperimentConfig:
    p = Path(name_or_path)
    if not p.suffix:
        p = CONFIGS_DIR / "experiments" / f"{name_or_path}.yaml"
    return load_yaml(ExperimentConfig, p)


class TransferMetrics(BaseModel):
    method: str
    seed: int
    target_field: str = ""
    target_value: Optional[float] = None
    mean_return: float
    return_std: float = 0.0
    source_return: float
    transfer_ratio: Optional[float] = None
    ratio_defined: bool = False
    normalized_length: float
    unsafe_episode_rate: float
    unsafe_trials: int = 0
    kappa_task: Optional[float] = None
    kappa_protect: Optional[float] = None


METRIC_FIELDS = list(TransferMetrics.model_fields)


class AdaptRecord(BaseModel):
    """Adapted thresholds as persisted next to the checkpoints."""

    schema_version: int = 1
    method: str
    estimator: str
    thresholds: ThresholdPair
    best_return: float
    unsafe_trials: int
    target: EnvParams


# ---------------------------
# metrics
# ---------------------------

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass
class RolloutSummary:
    returns: List[float]
    lengths: List[int]
    unsafe: List[bool]


def _rollouts(policy: Policy, factory: Callable[[], ProtectiveEnv], rollouts: int, rng: np.random.Generator) -> RolloutSummary:
    env = factory()
    out = RolloutSummary([], [], [])
    for _ in range(rollouts):
        if isinstance(policy, CombinedPolicy):
            policy.reset()
        ep = run_episode(policy, env, int(rng.integers(2**31 - 1)))
        out.returns.append(ep.total_reward)
        out.lengths.append(ep.length)
        out.unsafe.append(ep.unsafe)
    return out


def compute_transfer_metrics(
    policy: Policy,
    source: Callable[[], ProtectiveEnv],
    target: Callable[[], ProtectiveEnv],
    rollouts: int,
    rng: np.random.Generator,
    method: str = "",
    seed: int = 0,
    length_normalizer: int = MAX_ROLLOUT_LENGTH,
) -> TransferMetrics:
    if rollouts < 1:
        raise ConfigurationError("rollouts must be >= 1")
    src = _rollouts(policy, source, rollouts, rng)
    tgt = _rollouts(policy, target, rollouts, rng)
    source_return = float(np.mean(src.returns))
    target_return = float(np.mean(tgt.returns))
    ratio_defined = source_return > 0
    if not ratio_defined:
        logger.warning("%s seed %d: source return %.3f <= 0, transfer ratio undefined", method, seed, source_return)
    return TransferMetrics(
        method=method,
        seed=seed,
        mean_return=target_return,
        return_std=float(np.std(tgt.returns)),
        source_return=source_return,
        transfer_ratio=target_return / source_return if ratio_defined else None,
        ratio_defined=ratio_defined,
        normalized_length=min(1.0, float(np.mean(tgt.lengths)) / length_normalizer),
        unsafe_episode_rate=float(np.mean(tgt.unsafe)),
    )


def _fmt(v: Any) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(rows: Sequence[TransferMetrics], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])
    return path


def read_metrics_csv(path: Union[str, Path]) -> List[TransferMetrics]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"metrics file not found: {path}")
    with open(path, newline="", encoding="utf-8") as f:
        rows = []
        for r in csv.DictReader(f):
            data: Dict[str, Any] = {k: (v if v != "" else None) for k, v in r.items()}
            data["ratio_defined"] = data["ratio_defined"] == "1"
            data["target_field"] = data["target_field"] or ""
            rows.append(TransferMetrics.model_validate(data))
    return rows


# ---------------------------
# pipeline
# ---------------------------

def _tag(value: Optional[float], index: int) -> str:
    return f"t{index}" if value is None else f"t{index}_{value:g}"


class Pipeline:
    """One (config, seed) run; stages load their artifacts when present."""

    def __init__(self, config: ExperimentConfig, seed: int, out_dir: Optional[Union[str, Path]] = None):
        self.config = config
        self.seed = seed
        self.dir = Path(out_dir or config.output_dir) / f"seed_{seed}"
        self.env_cfg = config.env_config()
        self.randomization = config.randomization(self.env_cfg)
        self.source = env_factory(self.env_cfg)
        config.check_gap(self.env_cfg)
        self._cache: Dict[str, Any] = {}

    def rng(self, stage: str, *extra: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.seed, STAGE_IDS[stage], *extra]))

    def _run(self, stage: str, fn: Callable[[], Any], key: Optional[str] = None) -> Any:
        key = key or stage
        if key in self._cache:
            return self._cache[key]
        logger.info("stage %s (seed %d) start", key, self.seed)
        try:
            out = fn()
        except StageError:
            raise
        except (ToolkitError, ValueError, OSError, FloatingPointError) as e:
            raise StageError(stage, f"{type(e).__name__}: {e}") from e
        logger.info("stage %s (seed %d) done", key, self.seed)
        self._cache[key] = out
        return out

    def target_factory(self, params: EnvParams) -> Callable[[], ProtectiveEnv]:
        return env_factory(self.env_cfg, params)

    # --- training stages ---------------------------------------------
    def _policy_stage(self, stage: str, name: str, train: Callable[[], Any]) -> Tuple[GaussianPolicy, Mlp]:
        def fn() -> Tuple[GaussianPolicy, Mlp]:
            stem = self.dir / name
            if stem.with_suffix(".json").exists():
                logger.info("loading cached %s", stem)
                return load_policy(stem), load_mlp(self.dir / f"{name}_value")
            result = train()
            return result.policy, result.value_net

        return self._run(stage, fn)

    def task(self) -> Tuple[GaussianPolicy, Mlp]:
        return self._policy_stage("task", "task_policy", lambda: train_policy(
            self.source, self.config.task_ppo, self.rng("task"),
            randomization=self.randomization, out_dir=self.dir, name="task_policy",
        ))

    def task_dr_re(self) -> Tuple[GaussianPolicy, Mlp]:
        reward = self.env_cfg.reward
        boosted = self.env_cfg.model_copy(update={
            "reward": reward.model_copy(update={"alive_bonus": reward.alive_bonus * self.config.dr_re_alive_scale}),
        })
        return self._policy_stage("task_dr_re", "task_dr_re_policy", lambda: train_policy(
            env_factory(boosted), self.config.task_ppo, self.rng("task_dr_re"),
            randomization=self.randomization, out_dir=self.dir, name="task_dr_re_policy",
        ))

    def seed_states(self) -> SeedStateBuffer:
        def fn() -> SeedStateBuffer:
            stem = self.dir / "seed_states"
            if stem.with_suffix(".json").exists():
                return SeedStateBuffer.load(stem)
            pi_task, _ = self.task()
            noise = self.config.noise_scale if self.config.noise_scale is not None else default_noise_scale(pi_task)
            buf = collect_seed_states(
                pi_task, self.source, noise, self.config.seed_rollouts, self.rng("seed_states"),
                randomization=self.randomization,
            )
            buf.save(stem)
            return buf

        return self._run("seed_states", fn)

    def protect(self) -> Tuple[GaussianPolicy, Mlp]:
        return self._policy_stage("protect", "protect_policy", lambda: train_protect(
            self.source, self.seed_states(), self.config.protect_reward, self.config.protect_ppo,
            self.rng("protect"), randomization=self.randomization, out_dir=self.dir,
        ))

    @property
    def v_max(self) -> float:
        return value_normalizer(self.config.protect_reward, self.config.protect_ppo.gamma, self.env_cfg.horizon)

    def osse_dataset(self) -> OsseDataset:
        def fn() -> OsseDataset:
            path = self.dir / "osse_dataset.csv"
            if path.exists():
                return OsseDataset.from_csv(path)
            pi_task, _ = self.task()
            pi_protect, v_protect = self.protect()
            data = build_osse_dataset(
                pi_task, pi_protect, v_protect, self.source, self.seed_states(),
                self.config.protect_rollouts, self.rng("osse_data"), v_max=self.v_max,
            )
            data.to_csv(path)
            return data

        return self._run("osse_data", fn)

    def osse(self) -> OsseModel:
        def fn() -> OsseModel:
            stem = self.dir / "osse"
            if stem.with_suffix(".json").exists():
                return OsseModel.load(stem)
            model = train_osse(self.osse_dataset(), self.rng("osse"), self.config.osse)
            model.save(stem)
            return model

        return self._run("osse", fn)

    # --- adaptation ------------------------------------------------------
    def estimator(self, method: str) -> Callable[[np.ndarray], float]:
        if method == "no_osse":
            _, v_protect = self.protect()
            v_max = self.v_max
            return lambda obs: float(np.clip(forward(v_protect, obs)[0] / v_max, 0.0, 1.0))
        return self.osse()

    def adapt(self, method: str, index: int, params: EnvParams) -> AdaptRecord:
        tag = _tag(self._sweep_value(params), index)
        record_path = self.dir / f"thresholds_{method}_{tag}.yaml"

        def fn() -> AdaptRecord:
            if record_path.exists():
                return load_yaml(AdaptRecord, record_path)
            pi_task, _ = self.task()
            pi_protect, _ = self.protect()
            psi = self.estimator(method)
            rng = self.rng("adapt", METHODS.index(method), index)
            target = self.target_factory(params)
            if method == "safe_bayes":
                record = self._safe_bayes(pi_task, pi_protect, psi, target, rng, params, tag)
            else:
                estimator = "value_function" if method == "no_osse" else "osse"
                result = adapt_thresholds(pi_task, pi_protect, psi, target, self.config.adapt, rng, estimator=estimator)
                write_adapt_trace_csv(result, self.dir / f"adapt_{method}_{tag}.csv")
                record = _record(method, result, params)
            save_yaml(record, record_path)
            return record

        return self._run("adapt", fn, key=f"adapt_{method}_{tag}")

    def _safe_bayes(self, pi_task, pi_protect, psi, target, rng, params: EnvParams, tag: str) -> AdaptRecord:
        policy = CombinedPolicy.from_policies(pi_task, pi_protect, psi)
        adapt = self.config.adapt

        def objective(pair: ThresholdPair) -> Tuple[float, bool]:
            ev = evaluate_combined(
                target, policy.with_thresholds(pair), adapt.eval_episodes, rng,
                unsafe_definition=adapt.unsafe_definition, unsafe_fraction=adapt.unsafe_fraction,
            )
            return ev.mean_return, ev.unsafe

        state = bayes_search(objective, self.config.safe_bayes_budget, adapt.kappa_min, rng)
        write_bayes_trace_csv(state, self.dir / f"adapt_safe_bayes_{tag}.csv")
        best, best_return = state.best()
        return AdaptRecord(
            method="safe_bayes", estimator="osse", thresholds=best, best_return=best_return,
            unsafe_trials=state.unsafe_trials, target=params,
        )

    def _sweep_value(self, params: EnvParams) -> Optional[float]:
        sweep = self.config.target_sweep
        return float(getattr(params, sweep.field)) if sweep is not None else None

    # --- evaluation ------------------------------------------------------
    def evaluate(self, method: Optional[str] = None) -> List[TransferMetrics]:
        method = method or self.config.method
        rows: List[TransferMetrics] = []
        for index, params in enumerate(self.config.targets()):
            rows += self._evaluate_target(method, index, params)
        return rows

    def _evaluate_target(self, method: str, index: int, params: EnvParams) -> List[TransferMetrics]:
        target = self.target_factory(params)
        sweep_value = self._sweep_value(params)
        extra = {
            "target_field": self.config.target_sweep.field if self.config.target_sweep else "",
            "target_value": sweep_value,
        }
        rows: List[TransferMetrics] = []
        try:
            if method in ("dr", "dr_re"):
                pi, _ = self.task() if method == "dr" else self.task_dr_re()
                m = compute_transfer_metrics(
                    pi.mean_action, self.source, target, self.config.eval_rollouts,
                    self.rng("eval", METHODS.index(method), index), method=method, seed=self.seed,
                )
                rows.append(m.model_copy(update=extra))
            else:
                record = self.adapt(method, index, params)
                pi_task, _ = self.task()
                pi_protect, _ = self.protect()
                combined = CombinedPolicy.from_policies(pi_task, pi_protect, self.estimator(method), record.thresholds)
                m = compute_transfer_metrics(
                    combined, self.source, target, self.config.eval_rollouts,
                    self.rng("eval", METHODS.index(method), index), method=method, seed=self.seed,
                )
                rows.append(m.model_copy(update={
                    **extra,
                    "unsafe_trials": record.unsafe_trials,
                    "kappa_task": record.thresholds.kappa_task,
                    "kappa_protect": record.thresholds.kappa_protect,
                }))
                if method == "ours" and self.config.compare_policies:
                    for k, (name, pi) in enumerate((("task_only", pi_task), ("protect_only", pi_protect))):
                        m = compute_transfer_metrics(
                            pi.mean_action, self.source, target, self.config.eval_rollouts,
                            self.rng("eval", len(METHODS) + k, index), method=name, seed=self.seed,
                        )
                        rows.append(m.model_copy(update=extra))
        except StageError:
            raise
        except (ToolkitError, ValueError, OSError, FloatingPointError) as e:
            raise StageError("eval", f"{type(e).__name__}: {e}") from e
        return rows


def _record(method: str, result: AdaptResult, params: EnvParams) -> AdaptRecord:
    return AdaptRecord(
        method=method, estimator=result.estimator, thresholds=result.thresholds,
        best_return=result.best_return, unsafe_trials=result.unsafe_trials, target=params,
    )


def write_bayes_trace_csv(state: BayesOptState, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["trial", "kappa_task", "kappa_protect", "mean_return", "unsafe"])
        for i, ((kt, kp), r, u) in enumerate(zip(state.points, state.returns, state.unsafe)):
            w.writerow([i, repr(kt), repr(kp), repr(r), int(u)])
    return path


def run_pipeline(config: ExperimentConfig, seed: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> List[TransferMetrics]:
    """Every stage for one seed; writes <out>/seed_<seed>/metrics_<method>.csv."""
    seed = config.seeds[0] if seed is None else seed
    pipe = Pipeline(config, seed, out_dir)
    rows = pipe.evaluate(config.method)
    write_metrics_csv(rows, pipe.dir / f"metrics_{config.method}.csv")
    return rows


def run_baseline_dr_re(config: ExperimentConfig, seed: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> List[TransferMetrics]:
    return run_pipeline(config.model_copy(update={"method": "dr_re"}), seed, out_dir)


def run_baseline_no_osse(config: ExperimentConfig, seed: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> List[TransferMetrics]:
    return run_pipeline(config.model_copy(update={"method": "no_osse"}), seed, out_dir)


def run_safe_bayes(config: ExperimentConfig, budget: int = 20, seed: Optional[int] = None, out_dir: Optional[Union[str, Path]] = None) -> List[TransferMetrics]:
    return run_pipeline(config.model_copy(update={"method": "safe_bayes", "safe_bayes_budget": budget}), seed, out_dir)


# ---------------------------
# selection analysis
# ---------------------------

def analyze_selection(pipe: Pipeline, method: str = "ours", episodes: int = 5) -> SelectionAnalysis:
    """Trace the adapted combined policy on the first target and fit the selection model."""
    params = pipe.config.targets()[0]
    record = pipe.adapt(method, 0, params)
    pi_task, _ = pipe.task()
    pi_protect, _ = pipe.protect()
    policy = CombinedPolicy.from_policies(pi_task, pi_protect, pipe.estimator(method), record.thresholds)
    try:
        ev = evaluate_combined(pipe.target_factory(params), policy, episodes, pipe.rng("analyze"))
        rows = selection_trace(ev.logs)
        write_selection_csv(rows, pipe.dir / f"selection_{method}.csv")
        names = HOPPER_FEATURES if pipe.env_cfg.env == "hopper" else NAV_FEATURES
        result = policy_selection_analysis(rows, feature_names=names)
    except ToolkitError as e:
        raise StageError("analyze", f"{type(e).__name__}: {e}") from e
    with open(pipe.dir / f"selection_weights_{method}.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["rank", "feature", "index", "weight"])
        for rank, fw in enumerate(result.ranked):
            w.writerow([rank, fw.name, fw.index, repr(fw.weight)])
    return result
