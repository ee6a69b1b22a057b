# app/neural.py
# Small numpy MLP stack: tanh hidden layers, identity output, exact reverse-mode
# gradients, Adam, 3-member ensembles, and a fixed-endian checkpoint format.

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigurationError, ContractViolation

CHECKPOINT_SCHEMA_VERSION = 1
DTYPE = "<f8"

# Hard defaults
DEFAULT_LR = 3e-4
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_EPS = 1e-8
ENSEMBLE_HIDDEN = (256, 128, 64)
ENSEMBLE_SIZE = 3


@dataclass
class Mlp:
    weights: List[np.ndarray]  # W[i] has shape (fan_in, fan_out)
    biases: List[np.ndarray]

    @property
    def layer_sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def params(self) -> List[np.ndarray]:
        out: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_params(self, params: Sequence[np.ndarray]) -> "Mlp":
        return Mlp(weights=[np.array(p) for p in params[0::2]], biases=[np.array(p) for p in params[1::2]])

    def copy(self) -> "Mlp":
        return self.with_params(self.params)


@dataclass
class Ensemble:
    members: List[Mlp]


@dataclass
class OptimState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0
    lr: float = DEFAULT_LR
    beta1: float = DEFAULT_BETAS[0]
    beta2: float = DEFAULT_BETAS[1]
    eps: float = DEFAULT_EPS


# ---------------------------
# init
# ---------------------------

def _orthogonal(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_mlp(
    layer_sizes: Sequence[int],
    rng: np.random.Generator,
    scheme: str = "fan_in",
    final_scale: float = 1.0,
) -> Mlp:
    """scheme: 'orthogonal' (policies) or 'fan_in' (value / estimator nets)."""
    if len(layer_sizes) < 2:
        raise ContractViolation("an MLP needs at least an input and an output size")
    weights, biases = [], []
    n_layers = len(layer_sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        last = i == n_layers - 1
        if scheme == "orthogonal":
            w = _orthogonal(rng, fan_in, fan_out, gain=1.0 if last else np.sqrt(2.0))
        elif scheme == "fan_in":
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        else:
            raise ConfigurationError(f"unknown init scheme '{scheme}'")
        if last:
            w = w * final_scale
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return Mlp(weights=weights, biases=biases)


def init_ensemble(input_dim: int, rng: np.random.Generator, hidden: Sequence[int] = ENSEMBLE_HIDDEN, size: int = ENSEMBLE_SIZE) -> Ensemble:
    return Ensemble(members=[init_mlp([input_dim, *hidden, 1], rng) for _ in range(size)])


# ---------------------------
# forward / backward
# ---------------------------

def _check_input(net: Mlp, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.weights[0].shape[0]:
        raise ContractViolation(f"input dimension {x.shape[-1]} != {net.weights[0].shape[0]}")
    return x


def forward_cache(net: Mlp, x: np.ndarray) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Returns output and the list of layer inputs (post-activation)."""
    h = _check_input(net, x)
    acts = [h]
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        h = z if i == last else np.tanh(z)
        if i != last:
            acts.append(h)
    return h, acts


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return forward_cache(net, x)[0]


def backward(net: Mlp, x: np.ndarray, output_gradient: np.ndarray, cache: Optional[List[np.ndarray]] = None) -> List[np.ndarray]:
    """Gradients (same order as net.params) of sum(output * output_gradient)."""
    if cache is None:
        _, cache = forward_cache(net, x)
    delta = np.atleast_2d(np.asarray(output_gradient, dtype=float))
    grads: List[np.ndarray] = [np.empty(0)] * (2 * len(net.weights))
    for i in reversed(range(len(net.weights))):
        a_in = np.atleast_2d(cache[i])
        grads[2 * i] = a_in.T @ delta
        grads[2 * i + 1] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ net.weights[i].T) * (1.0 - np.atleast_2d(cache[i]) ** 2)
    return grads


def ensemble_predict(ens: Ensemble, x: np.ndarray) -> Union[float, np.ndarray]:
    outs = np.stack([forward(m, x)[..., 0] for m in ens.members])
    mean = outs.mean(axis=0)
    return float(mean) if np.ndim(mean) == 0 else mean


def ensemble_spread(ens: Ensemble, x: np.ndarray) -> Union[float, np.ndarray]:
    outs = np.stack([forward(m, x)[..., 0] for m in ens.members])
    std = outs.std(axis=0)
    return float(std) if np.ndim(std) == 0 else std


# ---------------------------
# Adam
# ---------------------------

def adam_state(params: Sequence[np.ndarray], lr: float = DEFAULT_LR, betas: Tuple[float, float] = DEFAULT_BETAS, eps: float = DEFAULT_EPS) -> OptimState:
    return OptimState(
        m=[np.zeros_like(p, dtype=float) for p in params],
        v=[np.zeros_like(p, dtype=float) for p in params],
        lr=lr, beta1=betas[0], beta2=betas[1], eps=eps,
    )


def optimizer_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], opt: OptimState) -> List[np.ndarray]:
    if len(params) != len(grads) or len(params) != len(opt.m):
        raise ContractViolation("params, grads and optimizer state disagree in length")
    opt.t += 1
    c1 = 1.0 - opt.beta1 ** opt.t
    c2 = 1.0 - opt.beta2 ** opt.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.asarray(g, dtype=float)
        if g.shape != np.shape(p):
            raise ContractViolation(f"gradient {i} has shape {g.shape}, parameter has {np.shape(p)}")
        opt.m[i] = opt.beta1 * opt.m[i] + (1.0 - opt.beta1) * g
        opt.v[i] = opt.beta2 * opt.v[i] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[i] / c1
        v_hat = opt.v[i] / c2
        out.append(p - opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps))
    return out


# ---------------------------
# checkpoints: <stem>.json header + <stem>.bin little-endian float64 payload
# ---------------------------

def write_checkpoint(stem: Union[str, Path], kind: str, tensors: Sequence[Tuple[str, np.ndarray]], meta: Optional[Dict[str, Any]] = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "kind": kind,
        "dtype": DTYPE,
        "hidden_activation": "tanh",
        "output_activation": "identity",
        "tensors": [{"name": n, "shape": list(np.shape(t))} for n, t in tensors],
        "meta": meta or {},
    }
    payload = b"".join(np.ascontiguousarray(t, dtype=DTYPE).tobytes() for _, t in tensors)
    stem.with_suffix(".bin").write_bytes(payload)
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")
    return stem


def read_checkpoint(stem: Union[str, Path], kind: Optional[str] = None) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    stem = Path(stem)
    try:
        header = json.loads(stem.with_suffix(".json").read_text(encoding="utf-8"))
        payload = stem.with_suffix(".bin").read_bytes()
    except FileNotFoundError as e:
        raise ConfigurationError(f"checkpoint not found: {stem}") from e
    if header.get("schema_version") != CHECKPOINT_SCHEMA_VERSION or header.get("dtype") != DTYPE:
        raise ConfigurationError(f"{stem}: unsupported checkpoint header {header.get('schema_version')}/{header.get('dtype')}")
    if kind is not None and header.get("kind") != kind:
        raise ConfigurationError(f"{stem}: expected a '{kind}' checkpoint, found '{header.get('kind')}'")
    flat = np.frombuffer(payload, dtype=DTYPE)
    tensors, offset = {}, 0
    for spec in header["tensors"]:
        n = int(np.prod(spec["shape"])) if spec["shape"] else 1
        tensors[spec["name"]] = flat[offset:offset + n].astype(float).reshape(spec["shape"])
        offset += n
    if offset != flat.size:
        raise ConfigurationError(f"{stem}: payload size does not match header")
    return header, tensors


def mlp_tensors(net: Mlp, prefix: str = "") -> List[Tuple[str, np.ndarray]]:
    out = []
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        out += [(f"{prefix}W{i}", w), (f"{prefix}b{i}", b)]
    return out


def mlp_from_tensors(tensors: Dict[str, np.ndarray], prefix: str = "") -> Mlp:
    weights, biases, i = [], [], 0
    while f"{prefix}W{i}" in tensors:
        weights.append(tensors[f"{prefix}W{i}"])
        biases.append(tensors[f"{prefix}b{i}"])
        i += 1
    return Mlp(weights=weights, biases=biases)


def save_mlp(net: Mlp, stem: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
    return write_checkpoint(stem, "mlp", mlp_tensors(net), {"layer_sizes": net.layer_sizes, **(meta or {})})


def load_mlp(stem: Union[str, Path]) -> Mlp:
    _, tensors = read_checkpoint(stem, "mlp")
    return mlp_from_tensors(tensors)


def save_ensemble(ens: Ensemble, stem: Union[str, Path], meta: Optional[Dict[str, Any]] = None) -> Path:
    tensors: List[Tuple[str, np.ndarray]] = []
    for k, m in enumerate(ens.members):
        tensors += mlp_tensors(m, prefix=f"m{k}.")
    info = {"layer_sizes": ens.members[0].layer_sizes, "members": len(ens.members), **(meta or {})}
    return write_checkpoint(stem, "ensemble", tensors, info)


def load_ensemble(stem: Union[str, Path]) -> Tuple[Ensemble, Dict[str, Any]]:
    header, tensors = read_checkpoint(stem, "ensemble")
    members = [mlp_from_tensors(tensors, prefix=f"m{k}.") for k in range(header["meta"]["members"])]
    return Ensemble(members=members), header["meta"]
