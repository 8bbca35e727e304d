import json
import math
from enum import Enum
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import minimize

from .errors import CacheContractError, ConfigurationError
from .models import NetworkPayload
from .monitoring import RunLogger

NETWORK_FORMAT_VERSION = 1


class Activation(str, Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"


def _activate(kind: Activation, pre: np.ndarray) -> np.ndarray:
    if kind == Activation.TANH:
        return np.tanh(pre)
    if kind == Activation.RELU:
        return np.maximum(pre, 0.0)
    return pre


def _activation_grad(kind: Activation, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if kind == Activation.TANH:
        return 1.0 - post * post
    if kind == Activation.RELU:
        return (pre > 0.0).astype(pre.dtype)
    return np.ones_like(pre)


class DenseNet:
    """Полносвязная сеть: активация на скрытых слоях, выходной слой линейный"""

    def __init__(self, layer_sizes: Sequence[int], activation: Union[str, Activation] = Activation.TANH,
                 rng: Optional[np.random.Generator] = None):
        if len(layer_sizes) < 2 or any(s < 1 for s in layer_sizes):
            raise ConfigurationError(f"Invalid layer sizes: {list(layer_sizes)}")
        self.layer_sizes = [int(s) for s in layer_sizes]
        self.activation = Activation(activation)
        self.version = 0

        rng = rng or np.random.default_rng(0)
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out))

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def input_size(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_size(self) -> int:
        return self.layer_sizes[-1]

    def get_params(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def set_params(self, flat: np.ndarray):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ConfigurationError(f"Expected {self.n_params} parameters, got {flat.shape}")
        offset = 0
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[i] = flat[offset:offset + w.size].reshape(w.shape).copy()
            offset += w.size
            self.biases[i] = flat[offset:offset + b.size].copy()
            offset += b.size
        self.version += 1

    def __call__(self, x: np.ndarray) -> np.ndarray:
        y, _ = forward(self, x)
        return y

    def to_payload(self) -> NetworkPayload:
        return NetworkPayload(
            version=NETWORK_FORMAT_VERSION,
            layer_sizes=self.layer_sizes,
            activation=self.activation.value,
            weights=[w.ravel().tolist() for w in self.weights],
            biases=[b.tolist() for b in self.biases],
        )

    @classmethod
    def from_payload(cls, payload: NetworkPayload) -> "DenseNet":
        if payload.version != NETWORK_FORMAT_VERSION:
            raise ConfigurationError(f"Unsupported network format version: {payload.version}")
        net = cls(payload.layer_sizes, payload.activation)
        flat = []
        for w, b in zip(payload.weights, payload.biases):
            flat.extend(w)
            flat.extend(b)
        net.set_params(np.array(flat))
        return net

    def to_json(self) -> str:
        return json.dumps(self.to_payload().model_dump())

    @classmethod
    def from_json(cls, text: str) -> "DenseNet":
        return cls.from_payload(NetworkPayload.model_validate(json.loads(text)))


class ForwardCache:
    def __init__(self, version: int, inputs: List[np.ndarray], pre: List[np.ndarray],
                 post: List[np.ndarray]):
        self.version = version
        self.inputs = inputs
        self.pre = pre
        self.post = post


def forward(net: DenseNet, x: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x.reshape(1, -1) if single else x
    if a.shape[1] != net.input_size:
        raise ConfigurationError(f"Input size {a.shape[1]} != network input size {net.input_size}")

    inputs, pre, post = [], [], []
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        inputs.append(a)
        z = a @ w + b
        a = z if i == last else _activate(net.activation, z)
        pre.append(z)
        post.append(a)

    cache = ForwardCache(net.version, inputs, pre, post)
    return (a[0] if single else a), cache


def backward(net: DenseNet, cache: ForwardCache, upstream: np.ndarray) -> np.ndarray:
    """∂(Σ upstream·y)/∂params в порядке get_params()"""
    if cache.version != net.version:
        raise CacheContractError("Forward cache is stale: network parameters changed since forward()")

    delta = np.asarray(upstream, dtype=np.float64).reshape(cache.post[-1].shape)
    grads: List[Tuple[np.ndarray, np.ndarray]] = []
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            delta = delta * _activation_grad(net.activation, cache.pre[i], cache.post[i])
        grads.append((cache.inputs[i].T @ delta, delta.sum(axis=0)))
        delta = delta @ net.weights[i].T

    parts = []
    for gw, gb in reversed(grads):
        parts.append(gw.ravel())
        parts.append(gb)
    return np.concatenate(parts)


class AdamState:
    def __init__(self, n_params: int, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              lr: Optional[float] = None) -> Tuple[np.ndarray, bool]:
    """Шаг Adam с коррекцией смещения и decoupled weight decay.

    Нефинитный градиент: шаг отклоняется, возвращается (params, False).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != state.m.shape or params.shape != state.m.shape:
        raise ConfigurationError(f"Shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if not np.all(np.isfinite(grads)):
        return params, False

    lr = state.lr if lr is None else lr
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)

    updated = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if state.weight_decay > 0:
        updated = updated - lr * state.weight_decay * params
    return updated, True


class SgdState:
    def __init__(self, n_params: int, lr: float = 1e-3, weight_decay: float = 0.0):
        self.step = 0
        self.n_params = n_params
        self.lr = lr
        self.weight_decay = weight_decay


def sgd_step(state: SgdState, params: np.ndarray, grads: np.ndarray,
             lr: Optional[float] = None) -> Tuple[np.ndarray, bool]:
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(grads)):
        return params, False
    lr = state.lr if lr is None else lr
    state.step += 1
    updated = params - lr * grads
    if state.weight_decay > 0:
        updated = updated - lr * state.weight_decay * params
    return updated, True


class Optimizer:
    """Единый интерфейс для Adam и SGD"""

    def __init__(self, name: str, n_params: int, lr: float, weight_decay: float = 0.0):
        if name == "adam":
            self.state = AdamState(n_params, lr=lr, weight_decay=weight_decay)
            self._step = adam_step
        elif name == "sgd":
            self.state = SgdState(n_params, lr=lr, weight_decay=weight_decay)
            self._step = sgd_step
        else:
            raise ConfigurationError(f"Unknown optimizer: {name}")
        self.name = name

    def step(self, params: np.ndarray, grads: np.ndarray, lr: Optional[float] = None) -> Tuple[np.ndarray, bool]:
        return self._step(self.state, params, grads, lr)


class CosineSchedule:
    def __init__(self, base_lr: float, total_steps: int):
        if total_steps < 1:
            raise ConfigurationError("Cosine schedule needs at least one step")
        self.base_lr = base_lr
        self.total_steps = total_steps


def cosine_lr(schedule: CosineSchedule, step: int) -> float:
    step = min(max(step, 0), schedule.total_steps)
    return schedule.base_lr * (1.0 + math.cos(math.pi * step / schedule.total_steps)) / 2.0


class LbfgsResult:
    def __init__(self, params: np.ndarray, value: float, initial_value: float,
                 iterations: int, warning: Optional[str] = None):
        self.params = params
        self.value = value
        self.initial_value = initial_value
        self.iterations = iterations
        self.warning = warning

    @property
    def improved(self) -> bool:
        return self.value < self.initial_value


def lbfgs_refine(objective: Callable[[np.ndarray], Tuple[float, np.ndarray]], params: np.ndarray,
                 max_iters: int = 100, memory: int = 10,
                 logger: Optional[RunLogger] = None) -> LbfgsResult:
    """Уточнение L-BFGS; значение цели никогда не растёт.

    objective(p) -> (value, grad). Нефинитные значения трактуются как +inf.
    """
    params = np.asarray(params, dtype=np.float64).copy()
    initial_value, _ = objective(params)
    initial_value = float(initial_value) if np.isfinite(initial_value) else float("inf")

    best = {"value": initial_value, "params": params.copy()}

    def fun(p):
        value, grad = objective(p)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return float("inf"), np.zeros_like(p)
        if value < best["value"]:
            best["value"] = float(value)
            best["params"] = np.array(p, copy=True)
        return float(value), np.asarray(grad, dtype=np.float64)

    if not np.isfinite(initial_value) or max_iters < 1:
        return LbfgsResult(params, initial_value, initial_value, 0, "non-finite start" if max_iters else None)

    result = minimize(fun, params, jac=True, method="L-BFGS-B",
                      options={"maxiter": max_iters, "maxcor": memory,
                               "ftol": 1e-15, "gtol": 1e-10})

    warning = None
    if not result.success and "ITERATIONS" not in str(result.message).upper():
        warning = str(result.message)
        if logger:
            logger.warning(f"L-BFGS stopped early: {warning}; keeping best-so-far value {best['value']:.6g}")

    return LbfgsResult(best["params"], best["value"], initial_value, int(result.nit), warning)
