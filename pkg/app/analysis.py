# app/analysis.py
# Which observation features drive the task/protect choice: L2-regularized logistic
# regression on a standardized selection trace.

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .composite import Mode, SelectionRow
from .errors import DegenerateDataError

logger = logging.getLogger(__name__)

HOPPER_FEATURES = ("height", "pitch", "hip", "leg", "vx", "vz", "pitch_rate", "hip_rate", "leg_rate")
NAV_FEATURES = ("x", "y", "vx", "vy", "goal_dx", "goal_dy")


@dataclass(frozen=True)
class FeatureWeight:
    name: str
    index: int
    weight: float


@dataclass
class SelectionAnalysis:
    ranked: List[FeatureWeight]
    bias: float
    mean: np.ndarray
    std: np.ndarray
    accuracy: float


def standardize(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (x - mean) / std, mean, std


def fit_logistic(x: np.ndarray, y: np.ndarray, l2: float = 1e-3, lr: float = 0.5, steps: int = 2000) -> Tuple[np.ndarray, float]:
    """Full-batch gradient descent on mean log-loss + l2/2 * |w|^2 (bias unpenalized)."""
    n, d = x.shape
    w = np.zeros(d)
    b = 0.0
    for _ in range(steps):
        p = expit(x @ w + b)
        g = p - y
        w -= lr * (x.T @ g / n + l2 * w)
        b -= lr * float(g.mean())
    return w, b


def policy_selection_analysis(
    rows: Sequence[SelectionRow],
    feature_names: Optional[Sequence[str]] = None,
    l2: float = 1e-3,
    lr: float = 0.5,
    steps: int = 2000,
) -> SelectionAnalysis:
    """Features ranked by |weight| of a model predicting protect (1) vs task (0)."""
    if not rows:
        raise DegenerateDataError("empty selection trace")
    x = np.array([r.observation for r in rows], dtype=float)
    y = np.array([r.mode is Mode.PROTECT for r in rows], dtype=float)
    if y.min() == y.max():
        raise DegenerateDataError("selection trace contains a single mode; nothing to separate")
    names = list(feature_names) if feature_names is not None else [f"obs_{i}" for i in range(x.shape[1])]
    if len(names) != x.shape[1]:
        names = [f"obs_{i}" for i in range(x.shape[1])]

    z, mean, std = standardize(x)
    w, b = fit_logistic(z, y, l2=l2, lr=lr, steps=steps)
    accuracy = float(np.mean((expit(z @ w + b) > 0.5) == (y > 0.5)))
    ranked = sorted(
        (FeatureWeight(name=names[i], index=i, weight=float(w[i])) for i in range(len(w))),
        key=lambda f: -abs(f.weight),
    )
    logger.info(
        "selection analysis: accuracy %.3f, top features %s",
        accuracy, ", ".join(f"{f.name}={f.weight:+.3f}" for f in ranked[:3]),
    )
    return SelectionAnalysis(ranked=ranked, bias=b, mean=mean, std=std, accuracy=accuracy)
