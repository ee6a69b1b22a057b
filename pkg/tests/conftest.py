from dataclasses import dataclass

import numpy as np
import pytest

from app.env_config import EnvConfig, SafetySpec, TaskRewardWeights, load_env_config
from app.envcore import ProtectiveEnv, SafetyView, StepResult
from app.harness import ExperimentConfig
from app.neural import Mlp
from app.ppo import GaussianPolicy, PpoConfig
from app.safety import OsseTrainConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run slow statistical checks")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


# ---------------------------
# scripted 1-D chain: s' = s + a, unsafe below 0
# ---------------------------

@dataclass
class ChainState:
    s: float

    def safety_view(self) -> SafetyView:
        return SafetyView(position=(self.s, 0.0))


class ChainEnv(ProtectiveEnv):
    action_dim = 1
    observation_dim = 1

    def __init__(self, start: float = 1.0):
        self.start = start
        super().__init__(EnvConfig(env="pointnav", safety=SafetySpec(), reward=TaskRewardWeights(), horizon=5))
        self.state = ChainState(start)

    def default_state(self, rng):
        return ChainState(self.start)

    def get_state(self):
        return np.array([self.state.s])

    def _state_from_vector(self, vector):
        return ChainState(float(vector[0]))

    def observation(self):
        return np.array([self.state.s])

    def _advance(self, commanded, effective):
        self.state = ChainState(self.state.s + float(effective[0]))
        safe = self.state.s >= 0.0
        return StepResult(next_observation=self.observation(), reward=1.0, is_safe=safe, is_terminal=not safe)


def constant_policy(value, act_dim: int = 1, obs_dim: int = 1, log_std: float = -20.0) -> GaussianPolicy:
    """Policy whose mean action is `value` everywhere."""
    net = Mlp(weights=[np.zeros((obs_dim, act_dim))], biases=[np.full(act_dim, value, dtype=float)])
    return GaussianPolicy(mean_net=net, log_std=np.full(act_dim, log_std))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def nav_config():
    return load_env_config("pointnav")


@pytest.fixture
def hopper_config():
    return load_env_config("hopper")


@pytest.fixture
def tiny_ppo():
    return PpoConfig(iterations=1, steps_per_batch=64, minibatch_size=32, epochs=2, hidden=(8, 8), value_hidden=(8, 8))


@pytest.fixture
def tiny_experiment(tmp_path, tiny_ppo):
    return ExperimentConfig(
        name="tiny",
        env="pointnav",
        horizon=30,
        target={"friction": 0.2, "latency_steps": 3},
        task_ppo=tiny_ppo,
        protect_ppo=tiny_ppo,
        osse=OsseTrainConfig(hidden=(8, 8), steps=20, minibatch_size=16),
        adapt={"delta": 0.5, "kappa_min": 0.1, "eval_episodes": 1},
        seed_rollouts=2,
        protect_rollouts=2,
        eval_rollouts=2,
        safe_bayes_budget=4,
        output_dir=str(tmp_path / "runs"),
    )
