# app/bayes.py
# Gaussian-process Bayesian optimization over the feasible threshold triangle
# {kappa_min <= kappa_task <= kappa_protect <= 1} (the Safe-Bayes baseline).

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np
from numpy.linalg import LinAlgError
from scipy.stats import norm, qmc
from sklearn.exceptions import ConvergenceWarning
from sklearn.gaussian_process import GaussianProcessRegressor
from sklearn.gaussian_process.kernels import RBF
from tenacity import RetryError, Retrying, before_sleep_log, retry_if_exception_type, stop_after_attempt

from .composite import ThresholdPair
from .config import settings
from .errors import ContractViolation, DegenerateDataError

logger = logging.getLogger(__name__)

# Hard defaults
LENGTH_SCALE = 0.2
NOISE = 1e-3
XI = 0.01
INITIAL_POINTS = 3
CANDIDATES = 2000

Objective = Callable[[ThresholdPair], Tuple[float, bool]]


def make_regressor(length_scale: float, alpha: float) -> GaussianProcessRegressor:
    """Fixed-hyperparameter GP: RBF kernel, no marginal-likelihood refit, standardized targets."""
    return GaussianProcessRegressor(
        kernel=RBF(length_scale=length_scale, length_scale_bounds="fixed"),
        alpha=alpha,
        optimizer=None,
        normalize_y=True,
    )


class GaussianProcess:
    """Surrogate over (kappa_task, kappa_protect); alpha grows tenfold per failed factorization."""

    def __init__(
        self,
        length_scale: float = LENGTH_SCALE,
        noise: float = NOISE,
        jitter: Optional[float] = None,
        max_retries: Optional[int] = None,
    ):
        self.length_scale = length_scale
        self.noise = noise
        self.jitter = settings.GP_JITTER if jitter is None else jitter
        self.max_retries = settings.GP_MAX_JITTER_RETRIES if max_retries is None else max_retries
        self.regressor: Optional[GaussianProcessRegressor] = None

    def _alpha(self, attempt: int) -> float:
        return self.noise if attempt == 1 else self.noise + self.jitter * 10.0 ** (attempt - 2)

    def fit(self, x: np.ndarray, y: np.ndarray) -> "GaussianProcess":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        if len(x) != len(y) or len(x) == 0:
            raise ContractViolation("GP needs matching, nonempty inputs and targets")
        try:
            for attempt in Retrying(
                stop=stop_after_attempt(self.max_retries),
                retry=retry_if_exception_type(LinAlgError),
                before_sleep=before_sleep_log(logger, logging.WARNING),
            ):
                with attempt:
                    regressor = make_regressor(self.length_scale, self._alpha(attempt.retry_state.attempt_number))
                    with warnings.catch_warnings():
                        warnings.simplefilter("ignore", ConvergenceWarning)
                        regressor.fit(x, y)
        except RetryError as e:
            raise DegenerateDataError(f"kernel matrix not positive definite after {self.max_retries} attempts") from e
        self.regressor = regressor
        return self

    def predict(self, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        if self.regressor is None:
            raise ContractViolation("GP used before fit")
        x = np.atleast_2d(np.asarray(x, dtype=float))
        with warnings.catch_warnings():
            # tiny negative variances at training points are clipped to zero
            warnings.simplefilter("ignore", UserWarning)
            mean, std = self.regressor.predict(x, return_std=True)
        return mean, np.maximum(std, 1e-12)


def expected_improvement(mean: np.ndarray, std: np.ndarray, best: float, xi: float = XI) -> np.ndarray:
    mean = np.asarray(mean, dtype=float)
    std = np.asarray(std, dtype=float)
    imp = mean - best - xi
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(std > 0, imp / std, 0.0)
        ei = imp * norm.cdf(z) + std * norm.pdf(z)
    return np.where(std > 0, ei, np.maximum(imp, 0.0))


def fold_into_triangle(u: np.ndarray, kappa_min: float) -> np.ndarray:
    """Map unit-square samples to (kappa_task, kappa_protect) with kappa_task <= kappa_protect."""
    pts = kappa_min + (1.0 - kappa_min) * np.asarray(u, dtype=float)
    return np.sort(pts, axis=1)


@dataclass
class BayesOptState:
    budget: int
    kappa_min: float
    length_scale: float = LENGTH_SCALE
    noise: float = NOISE
    points: List[Tuple[float, float]] = field(default_factory=list)
    returns: List[float] = field(default_factory=list)
    unsafe: List[bool] = field(default_factory=list)

    def add(self, pair: ThresholdPair, mean_return: float, unsafe: bool) -> None:
        if len(self.points) >= self.budget:
            raise ContractViolation(f"trial budget of {self.budget} exhausted")
        self.points.append((pair.kappa_task, pair.kappa_protect))
        self.returns.append(float(mean_return))
        self.unsafe.append(bool(unsafe))

    @property
    def unsafe_trials(self) -> int:
        return sum(self.unsafe)

    def best(self) -> Tuple[ThresholdPair, float]:
        """Best safe trial; falls back to the best overall when every trial was unsafe."""
        safe = [i for i, u in enumerate(self.unsafe) if not u]
        pool = safe or list(range(len(self.points)))
        i = max(pool, key=lambda k: self.returns[k])
        kt, kp = self.points[i]
        return ThresholdPair(kappa_task=kt, kappa_protect=kp), self.returns[i]


def bayes_search(
    objective: Objective,
    budget: int,
    kappa_min: float,
    rng: np.random.Generator,
    length_scale: float = LENGTH_SCALE,
    noise: float = NOISE,
    xi: float = XI,
    candidates: int = CANDIDATES,
) -> BayesOptState:
    if budget < INITIAL_POINTS:
        raise ContractViolation(f"budget must be >= {INITIAL_POINTS}")
    if not 0.0 <= kappa_min < 1.0:
        raise ContractViolation("kappa_min must lie in [0, 1)")
    state = BayesOptState(budget=budget, kappa_min=kappa_min, length_scale=length_scale, noise=noise)

    def trial(x: np.ndarray) -> None:
        pair = ThresholdPair(kappa_task=float(x[0]), kappa_protect=float(x[1]))
        mean_return, unsafe = objective(pair)
        state.add(pair, mean_return, unsafe)
        logger.info(
            "bayes trial %d/%d: kappa_task=%.3f kappa_protect=%.3f return=%.2f unsafe=%s",
            len(state.points), budget, pair.kappa_task, pair.kappa_protect, mean_return, unsafe,
        )

    sampler = qmc.LatinHypercube(d=2, seed=rng)
    for x in fold_into_triangle(sampler.random(INITIAL_POINTS), kappa_min):
        trial(x)

    gp = GaussianProcess(length_scale=length_scale, noise=noise)
    while len(state.points) < budget:
        gp.fit(np.array(state.points), np.array(state.returns))
        cand = fold_into_triangle(rng.random((candidates, 2)), kappa_min)
        mean, std = gp.predict(cand)
        ei = expected_improvement(mean, std, max(state.returns), xi)
        trial(cand[int(np.argmax(ei))])
    return state
