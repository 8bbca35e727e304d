import io
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import sympy

from .errors import ConfigurationError
from .monitoring import RunLogger

DATASET_MAGIC = b"FXSD"
DATASET_FORMAT_VERSION = 1
KIND_TRAJECTORIES = 1
KIND_PAIRS = 2

TRAINING_DT = 0.01
TRAINING_STEPS = 100


class NoiseKind(str, Enum):
    GAUSSIAN = "gaussian"
    EXPONENTIAL = "exponential"


# (среднее, стандартное отклонение) единичного источника шума
NOISE_MOMENTS: Dict[NoiseKind, Tuple[float, float]] = {
    NoiseKind.GAUSSIAN: (0.0, 1.0),
    NoiseKind.EXPONENTIAL: (1.0, 1.0),
}


class SdeSpec:
    """dx = μ(x)dt + σ(x)·ξ√dt; ξ ~ N(0, I_m) или exp(1) покомпонентно.

    drift: (N, d) -> (N, d); diffusion: (N, d) -> (N, d, m).
    """

    def __init__(self, dim: int, drift: Callable[[np.ndarray], np.ndarray],
                 diffusion: Callable[[np.ndarray], np.ndarray], noise_dim: Optional[int] = None,
                 noise_kind: Union[str, NoiseKind] = NoiseKind.GAUSSIAN, name: str = "custom"):
        self.dim = dim
        self.drift = drift
        self.diffusion = diffusion
        self.noise_dim = noise_dim or dim
        self.noise_kind = NoiseKind(noise_kind)
        self.name = name

    @property
    def noise_mean(self) -> float:
        return NOISE_MOMENTS[self.noise_kind][0]

    @property
    def noise_std(self) -> float:
        return NOISE_MOMENTS[self.noise_kind][1]

    def draw_noise(self, rng: np.random.Generator, shape: Tuple[int, ...]) -> np.ndarray:
        if self.noise_kind == NoiseKind.EXPONENTIAL:
            return rng.exponential(1.0, size=shape)
        return rng.standard_normal(shape)

    def step(self, x: np.ndarray, xi: np.ndarray, dt: float) -> np.ndarray:
        forcing = np.einsum("ndm,nm->nd", self.diffusion(x), xi)
        return x + self.drift(x) * dt + forcing * math.sqrt(dt)


def constant_diffusion(matrix) -> Callable[[np.ndarray], np.ndarray]:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))

    def diffusion(x: np.ndarray) -> np.ndarray:
        return np.broadcast_to(matrix, (x.shape[0],) + matrix.shape)
    return diffusion


class InitRegion:
    """Равномерное распределение на прямоугольнике"""

    def __init__(self, low: Sequence[float], high: Sequence[float]):
        self.low = np.asarray(low, dtype=np.float64)
        self.high = np.asarray(high, dtype=np.float64)
        if self.low.shape != self.high.shape or np.any(self.high < self.low):
            raise ConfigurationError(f"Invalid init region: {low} .. {high}")

    @property
    def dim(self) -> int:
        return self.low.size

    def __call__(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, self.dim))


InitSampler = Union[InitRegion, Callable[[np.random.Generator, int], np.ndarray], np.ndarray, Sequence[float]]


def _as_sampler(init: InitSampler) -> Callable[[np.random.Generator, int], np.ndarray]:
    if callable(init):
        return init
    point = np.asarray(init, dtype=np.float64).ravel()
    return lambda rng, n: np.tile(point, (n, 1))


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


class TrajectorySet:
    def __init__(self, states: np.ndarray, dt: float, seed: int, excluded: int = 0):
        self.states = states
        self.dt = dt
        self.seed = seed
        self.excluded = excluded

    @property
    def n_trajectories(self) -> int:
        return self.states.shape[0]

    @property
    def n_steps(self) -> int:
        return self.states.shape[1] - 1

    @property
    def dim(self) -> int:
        return self.states.shape[2]

    @property
    def t_final(self) -> float:
        return self.n_steps * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt


def euler_maruyama(spec: SdeSpec, init_sampler: InitSampler, dt: float, n_steps: int,
                   n_trajectories: int, seed: int, logger: Optional[RunLogger] = None) -> TrajectorySet:
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if n_steps < 1 or n_trajectories < 1:
        raise ConfigurationError("n_steps and n_trajectories must be >= 1")

    sampler = _as_sampler(init_sampler)
    x0 = np.empty((n_trajectories, spec.dim))
    noise = np.empty((n_trajectories, n_steps, spec.noise_dim))
    # Каждая траектория получает свой поток случайных чисел
    for i in range(n_trajectories):
        rng = trajectory_rng(seed, i)
        x0[i] = sampler(rng, 1)[0]
        noise[i] = spec.draw_noise(rng, (n_steps, spec.noise_dim))

    states = np.empty((n_trajectories, n_steps + 1, spec.dim))
    states[:, 0] = x0
    x = x0
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            x = spec.step(x, noise[:, k], dt)
            states[:, k + 1] = x

    finite = np.all(np.isfinite(states), axis=(1, 2))
    excluded = int(np.count_nonzero(~finite))
    if excluded:
        if logger:
            logger.warning(f"Excluded {excluded} of {n_trajectories} diverged trajectories ({spec.name})")
        states = states[finite]
    return TrajectorySet(states, dt, seed, excluded)


class TransitionPairs:
    def __init__(self, x_t: np.ndarray, x_next: np.ndarray, dt: float):
        self.x_t = x_t
        self.x_next = x_next
        self.dt = dt

    def __len__(self) -> int:
        return self.x_t.shape[0]

    @property
    def dim(self) -> int:
        return self.x_t.shape[1]

    def subset(self, index: np.ndarray) -> "TransitionPairs":
        return TransitionPairs(self.x_t[index], self.x_next[index], self.dt)


def make_pairs(traj: TrajectorySet) -> TransitionPairs:
    d = traj.dim
    x_t = traj.states[:, :-1].reshape(-1, d)
    x_next = traj.states[:, 1:].reshape(-1, d)
    return TransitionPairs(x_t.copy(), x_next.copy(), traj.dt)


class RegressionSet:
    def __init__(self, x: np.ndarray, y: np.ndarray, dim: int, center: float = 0.0):
        self.x = x
        self.y = y
        self.dim = dim
        self.center = center

    def __len__(self) -> int:
        return self.y.shape[0]

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]


def raw_targets(pairs: TransitionPairs, dim: int) -> np.ndarray:
    if pairs.dt == 0:
        raise ConfigurationError("Transition pairs have dt = 0")
    if not 0 <= dim < pairs.dim:
        raise ConfigurationError(f"Output dimension {dim} out of range for d={pairs.dim}")
    return (pairs.x_next[:, dim] - pairs.x_t[:, dim]) / pairs.dt


def drift_targets(pairs: TransitionPairs, dim: int, noise_center: float = 0.0) -> RegressionSet:
    """yᵢ = (x_{t+Δt} − x_t)/Δt − noise_center"""
    y = raw_targets(pairs, dim) - noise_center
    if not np.all(np.isfinite(y)):
        raise ConfigurationError("Non-finite regression targets")
    return RegressionSet(pairs.x_t, y, dim, noise_center)


def _binned_conditional_mean(x: np.ndarray, y: np.ndarray, n_bins: int) -> np.ndarray:
    d = x.shape[1]
    per_dim = max(2, int(round(n_bins ** (1.0 / d))))
    cells = []
    for j in range(d):
        edges = np.quantile(x[:, j], np.linspace(0.0, 1.0, per_dim + 1)[1:-1])
        cells.append(np.searchsorted(edges, x[:, j]))
    cell = np.ravel_multi_index(cells, (per_dim,) * d)
    sums = np.bincount(cell, weights=y, minlength=per_dim ** d)
    counts = np.bincount(cell, minlength=per_dim ** d)
    return (sums / np.maximum(counts, 1))[cell]


def estimate_noise_center(pairs: TransitionPairs, dim: int, mean_to_std: float,
                          n_bins: int = 50) -> float:
    """Сдвиг среднего негауссовой вынуждающей силы в единицах целей.

    Оценка: mean_to_std · std(y − E[y | x]), где условное среднее берётся по
    бинам. Знать нужно только семейство шума, но не σ.
    """
    if mean_to_std == 0:
        return 0.0
    y = raw_targets(pairs, dim)
    residual = y - _binned_conditional_mean(pairs.x_t, y, n_bins)
    return float(mean_to_std * np.std(residual))


# --- эталонные задачи ---

@dataclass
class BenchmarkCase:
    name: str
    spec: SdeSpec
    init_region: InitRegion
    n_trajectories: int
    t_eval: float
    eval_x0: List[np.ndarray]
    search_iterations: int
    sweep_low: np.ndarray
    sweep_high: np.ndarray
    reference_expressions: List[str]
    true_sigma: np.ndarray
    t_train: float = TRAINING_DT * TRAINING_STEPS
    density_times: List[float] = field(default_factory=list)

    @property
    def train_low(self) -> np.ndarray:
        return self.init_region.low

    @property
    def train_high(self) -> np.ndarray:
        return self.init_region.high


def _ou() -> BenchmarkCase:
    theta, mu, sigma = 1.0, 1.2, 0.3
    spec = SdeSpec(1, lambda x: theta * (mu - x), constant_diffusion([[sigma]]), name="ou")
    return BenchmarkCase(
        name="ou", spec=spec, init_region=InitRegion([0.0], [2.5]), n_trajectories=15000,
        t_eval=1.0, eval_x0=[np.array([-6.0]), np.array([1.5]), np.array([6.0])],
        search_iterations=90, sweep_low=np.array([-6.0]), sweep_high=np.array([6.0]),
        reference_expressions=["1.1989 - 0.9953*x1"], true_sigma=np.array([sigma]),
    )


def _trig() -> BenchmarkCase:
    m, sigma = 1, 0.8
    spec = SdeSpec(1, lambda x: np.sin(2 * m * np.pi * x), constant_diffusion([[sigma]]), name="trig")
    return BenchmarkCase(
        name="trig", spec=spec, init_region=InitRegion([0.0], [1.0]), n_trajectories=10000,
        t_eval=5.0, eval_x0=[np.array([-3.0]), np.array([0.6]), np.array([3.0])],
        search_iterations=120, sweep_low=np.array([-5.0]), sweep_high=np.array([5.0]),
        reference_expressions=["cos(6.2476*x1 - 4.6837)"], true_sigma=np.array([sigma]),
    )


def _double_well() -> BenchmarkCase:
    sigma = 0.5
    spec = SdeSpec(1, lambda x: x - x ** 3, constant_diffusion([[sigma]]), name="double_well")
    return BenchmarkCase(
        name="double_well", spec=spec, init_region=InitRegion([-2.0], [2.0]), n_trajectories=10000,
        t_eval=1.0, eval_x0=[np.array([-5.0]), np.array([1.5]), np.array([5.0])],
        search_iterations=500, sweep_low=np.array([-5.0]), sweep_high=np.array([5.0]),
        reference_expressions=["-0.9922*x1^3 + 0.9709*x1 + 0.0019"], true_sigma=np.array([sigma]),
        density_times=[5.0, 10.0, 30.0, 100.0],
    )


def _ol2d() -> BenchmarkCase:
    # μ = −∇V, V = 2.5(x₁² − 1)² + 5x₂²
    def drift(x):
        return np.stack([-10.0 * x[:, 0] * (x[:, 0] ** 2 - 1.0), -10.0 * x[:, 1]], axis=1)

    sigma = math.sqrt(2.0)
    spec = SdeSpec(2, drift, constant_diffusion(sigma * np.eye(2)), name="ol2d")
    return BenchmarkCase(
        name="ol2d", spec=spec, init_region=InitRegion([-1.5, -1.0], [1.5, 1.0]), n_trajectories=35000,
        t_eval=5.0, eval_x0=[np.array([-3.0, -3.0]), np.array([0.6, 0.6]), np.array([3.0, 3.0])],
        search_iterations=200, sweep_low=np.array([-5.0, -5.0]), sweep_high=np.array([5.0, 5.0]),
        reference_expressions=["-9.9178*x1^3 + 0.1625*x2^3 + 9.8165*x1 + 0.1204*x2 + 0.03",
                           "-0.0613*x1 - 9.9911*x2 + 0.0011"],
        true_sigma=np.array([sigma, sigma]),
    )


def _exp_noise() -> BenchmarkCase:
    mu, sigma = -2.0, 0.1
    spec = SdeSpec(1, lambda x: mu * x, constant_diffusion([[sigma]]),
                   noise_kind=NoiseKind.EXPONENTIAL, name="exp_noise")
    return BenchmarkCase(
        name="exp_noise", spec=spec, init_region=InitRegion([0.0], [2.5]), n_trajectories=10000,
        t_eval=1.0, eval_x0=[np.array([-2.0]), np.array([1.5]), np.array([5.0])],
        search_iterations=200, sweep_low=np.array([-5.0]), sweep_high=np.array([7.0]),
        reference_expressions=["-1.9751*x1"], true_sigma=np.array([sigma]),
    )


BENCHMARKS: Dict[str, Callable[[], BenchmarkCase]] = {
    "ou": _ou,
    "trig": _trig,
    "double_well": _double_well,
    "ol2d": _ol2d,
    "exp_noise": _exp_noise,
}


def benchmark(name: str) -> BenchmarkCase:
    if name not in BENCHMARKS:
        raise ConfigurationError(f"Unknown benchmark: {name}. Valid names: {', '.join(BENCHMARKS)}")
    return BENCHMARKS[name]()


def spec_from_strings(drift: Sequence[str], diffusion: Sequence[Sequence[float]],
                      noise_kind: Union[str, NoiseKind] = NoiseKind.GAUSSIAN,
                      name: str = "custom") -> SdeSpec:
    """SdeSpec из строк вида "1.2 - x1" (переменные x1..xd) и постоянной матрицы σ"""
    dim = len(drift)
    symbols = sympy.symbols(f"x1:{dim + 1}")
    try:
        parsed = [sympy.sympify(text, locals={str(s): s for s in symbols}) for text in drift]
    except (sympy.SympifyError, TypeError) as e:
        raise ConfigurationError(f"Cannot parse drift expression: {e}") from e
    unknown = set().union(*(p.free_symbols for p in parsed)) - set(symbols)
    if unknown:
        raise ConfigurationError(f"Unknown symbols in drift: {sorted(map(str, unknown))}")
    fns = [sympy.lambdify(symbols, p, modules="numpy") for p in parsed]

    def drift_fn(x: np.ndarray) -> np.ndarray:
        cols = [x[:, j] for j in range(dim)]
        return np.stack([np.broadcast_to(f(*cols), (x.shape[0],)) for f in fns], axis=1)

    matrix = np.atleast_2d(np.asarray(diffusion, dtype=np.float64))
    if matrix.shape[0] != dim:
        raise ConfigurationError(f"Diffusion matrix has {matrix.shape[0]} rows, expected {dim}")
    return SdeSpec(dim, drift_fn, constant_diffusion(matrix), noise_dim=matrix.shape[1],
                   noise_kind=noise_kind, name=name)


# --- форматы хранения ---

def trajectories_to_csv(traj: TrajectorySet) -> str:
    L, n, d = traj.states.shape
    table = np.column_stack([
        np.tile(traj.times, L),
        traj.states.reshape(-1, d),
        np.repeat(np.arange(L), n),
    ])
    header = ",".join(["t"] + [f"x{j + 1}" for j in range(d)] + ["trajectory_id"])
    buffer = io.StringIO()
    fmt = ["%.10g"] * (d + 1) + ["%d"]
    np.savetxt(buffer, table, delimiter=",", header=header, comments="", fmt=fmt)
    return buffer.getvalue()


def _encode(kind: int, data: np.ndarray, dt: float) -> bytes:
    n, points, d = data.shape
    header = np.array([DATASET_FORMAT_VERSION, kind, n, points, d], dtype="<i8").tobytes()
    return DATASET_MAGIC + header + np.array([dt], dtype="<f8").tobytes() + data.astype("<f8").tobytes()


def _decode(blob: bytes, expected_kind: int) -> Tuple[np.ndarray, float]:
    head = len(DATASET_MAGIC) + 5 * 8 + 8
    if len(blob) < head or blob[:4] != DATASET_MAGIC:
        raise ConfigurationError("Malformed dataset file: bad header")
    version, kind, n, points, d = np.frombuffer(blob[4:44], dtype="<i8")
    if version != DATASET_FORMAT_VERSION or kind != expected_kind:
        raise ConfigurationError(f"Unsupported dataset version/kind: {version}/{kind}")
    dt = float(np.frombuffer(blob[44:52], dtype="<f8")[0])
    body = np.frombuffer(blob[52:], dtype="<f8")
    if body.size != n * points * d:
        raise ConfigurationError("Malformed dataset file: truncated body")
    return body.reshape(int(n), int(points), int(d)).astype(np.float64), dt


def encode_trajectories(traj: TrajectorySet) -> bytes:
    return _encode(KIND_TRAJECTORIES, traj.states, traj.dt)


def decode_trajectories(blob: bytes, seed: int = 0) -> TrajectorySet:
    states, dt = _decode(blob, KIND_TRAJECTORIES)
    return TrajectorySet(states, dt, seed)


def encode_pairs(pairs: TransitionPairs) -> bytes:
    return _encode(KIND_PAIRS, np.stack([pairs.x_t, pairs.x_next], axis=1), pairs.dt)


def decode_pairs(blob: bytes) -> TransitionPairs:
    data, dt = _decode(blob, KIND_PAIRS)
    return TransitionPairs(data[:, 0].copy(), data[:, 1].copy(), dt)
