# app/registry.py
# Checkpoints served by the HTTP api: task and protective policies, the safety
# estimator and the adapted thresholds of one experiment seed directory.
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

from .composite import ThresholdPair
from .config import settings
from .env_config import load_yaml
from .errors import ConfigurationError
from .harness import AdaptRecord
from .ppo import GaussianPolicy, load_policy
from .safety import OsseModel

logger = logging.getLogger(__name__)


@dataclass
class PolicyBundle:
    pi_task: GaussianPolicy
    pi_protect: GaussianPolicy
    osse: OsseModel
    thresholds: ThresholdPair
    source: str = ""

    @property
    def observation_dim(self) -> int:
        return self.pi_task.mean_net.layer_sizes[0]


_bundle: Optional[PolicyBundle] = None

# methods whose switch runs on the OSSE; dr/dr_re have no thresholds, no_osse switches on V_protect
SERVABLE_METHODS = ("ours", "safe_bayes")


def load_bundle(directory: Union[str, Path], method: str = "ours") -> PolicyBundle:
    if method not in SERVABLE_METHODS:
        raise ConfigurationError(f"method '{method}' cannot be served; choose one of {', '.join(SERVABLE_METHODS)}")
    d = Path(directory)
    records = sorted(d.glob(f"thresholds_{method}_*.yaml"))
    if not records:
        raise ConfigurationError(f"no adapted thresholds for '{method}' under {d}")
    record = load_yaml(AdaptRecord, records[0])
    return PolicyBundle(
        pi_task=load_policy(d / "task_policy"),
        pi_protect=load_policy(d / "protect_policy"),
        osse=OsseModel.load(d / "osse"),
        thresholds=record.thresholds,
        source=str(records[0]),
    )


def install(bundle: PolicyBundle) -> PolicyBundle:
    global _bundle
    _bundle = bundle
    return bundle


def init_registry(directory: Optional[str] = None, method: Optional[str] = None) -> Optional[PolicyBundle]:
    directory = directory or settings.CHECKPOINT_DIR
    if _bundle is not None or directory is None:
        return _bundle
    bundle = install(load_bundle(directory, method or settings.SERVE_METHOD))
    logger.info("serving %s (kappa_task=%.3f, kappa_protect=%.3f)", bundle.source,
                bundle.thresholds.kappa_task, bundle.thresholds.kappa_protect)
    return bundle


def get_bundle() -> PolicyBundle:
    if _bundle is None:
        raise ConfigurationError("policy registry not initialized; set CHECKPOINT_DIR")
    return _bundle


def close_registry() -> None:
    global _bundle
    _bundle = None


def registry_ready() -> bool:
    return _bundle is not None
