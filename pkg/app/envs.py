# app/envs.py
import csv
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .env_config import EnvConfig, EnvParams, load_env_config
from .envcore import ProtectiveEnv
from .hopper import HopperLite
from .pointnav import PointNav2D

EnvFactory = Callable[[], ProtectiveEnv]

_ENV_CLASSES = {"hopper": HopperLite, "pointnav": PointNav2D}


def make_env(config: Union[EnvConfig, str], params: Optional[EnvParams] = None) -> ProtectiveEnv:
    if isinstance(config, str):
        config = load_env_config(config)
    return _ENV_CLASSES[config.env](config, params)


def env_factory(config: Union[EnvConfig, str], params: Optional[EnvParams] = None) -> EnvFactory:
    if isinstance(config, str):
        config = load_env_config(config)
    return lambda: make_env(config, params)


def write_rollout_csv(
    path: Union[str, Path],
    observations: Sequence[np.ndarray],
    actions: Sequence[np.ndarray],
    rewards: Sequence[float],
    safe_flags: Sequence[bool],
    dt: float,
    modes: Optional[Sequence[str]] = None,
) -> Path:
    """One row per control step: time, state, action, reward, mode, safety flag."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_obs = len(observations[0]) if len(observations) else 0
    n_act = len(actions[0]) if len(actions) else 0
    header = ["time"] + [f"obs_{i}" for i in range(n_obs)] + [f"act_{i}" for i in range(n_act)] + ["reward", "mode", "is_safe"]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        for t in range(len(actions)):
            mode = modes[t] if modes is not None else ""
            w.writerow(
                [repr(round(t * dt, 10))]
                + [repr(float(v)) for v in observations[t]]
                + [repr(float(v)) for v in actions[t]]
                + [repr(float(rewards[t])), mode, int(bool(safe_flags[t]))]
            )
    return path
