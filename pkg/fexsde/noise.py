import json
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import stats
from scipy.special import softmax

from .config import DecoderConfig
from .errors import ConfigurationError, NumericalError
from .expression import ExpressionInstance
from .models import DecoderPayload, LabeledPairsMeta
from .monitoring import RunLogger, StageMetrics
from .numerics import AdamState, CosineSchedule, DenseNet, adam_step, backward, cosine_lr, forward
from .simulation import TransitionPairs

DECODER_FORMAT_VERSION = 1
PAIRS_FORMAT_VERSION = 1
SCORE_CHUNK = 1024


class ResidualSet:
    def __init__(self, samples: np.ndarray, source_count: int, dropped: int = 0):
        self.samples = samples
        self.source_count = source_count
        self.dropped = dropped

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    def moments(self) -> Dict[str, List[float]]:
        return sample_moments(self.samples)


def sample_moments(samples: np.ndarray) -> Dict[str, List[float]]:
    samples = np.atleast_2d(samples)
    return {
        "mean": samples.mean(axis=0).tolist(),
        "std": samples.std(axis=0).tolist(),
        "skewness": np.atleast_1d(stats.skew(samples, axis=0)).tolist(),
    }


def residuals(pairs: TransitionPairs, drift: Sequence[ExpressionInstance],
              logger: Optional[RunLogger] = None, metrics: Optional[StageMetrics] = None) -> ResidualSet:
    """r = x_{t+Δt} − x_t − Δt·D̂(x_t); пары с нефинитным D̂ отбрасываются"""
    if len(drift) != pairs.dim:
        raise ConfigurationError(f"Expected {pairs.dim} drift expressions, got {len(drift)}")
    fitted = np.column_stack([expr.predict(pairs.x_t) for expr in drift])
    with np.errstate(over="ignore", invalid="ignore"):
        r = pairs.x_next - pairs.x_t - pairs.dt * fitted
    finite = np.all(np.isfinite(r), axis=1)
    dropped = int(np.count_nonzero(~finite))
    if dropped:
        if logger:
            logger.warning(f"Dropped {dropped} of {len(pairs)} pairs with non-finite drift evaluation")
        if metrics:
            metrics.increment("dropped_pairs", dropped)
    return ResidualSet(r[finite], len(pairs), dropped)


class DiffusionSchedule:
    """α_τ = 1−τ, β²_τ = τ; интегрирование по [δ, 1−δ], δ = 1/K"""

    def __init__(self, K: int = 10000, delta: Optional[float] = None):
        if K < 1:
            raise ConfigurationError("K must be >= 1")
        self.K = K
        self.delta = 1.0 / K if delta is None else delta
        if not 0 < self.delta < 0.5:
            raise ConfigurationError(f"Endpoint clamp must lie in (0, 0.5), got {self.delta}")

    def alpha(self, tau):
        return 1.0 - tau

    def beta2(self, tau):
        return tau

    def b(self, tau):
        return -1.0 / (1.0 - tau)

    def sigma2(self, tau):
        return 1.0 + 2.0 * tau / (1.0 - tau)

    @property
    def step(self) -> float:
        return (1.0 - 2.0 * self.delta) / self.K

    def check_tau(self, tau: float):
        if not (0.0 < tau <= 1.0 - self.delta + 1e-12):
            raise ConfigurationError(f"tau={tau} outside (0, {1.0 - self.delta}]")


def mc_score(z: np.ndarray, tau: float, batch: np.ndarray, delta: float = 0.0) -> np.ndarray:
    """V(z, τ) для смеси α_τ r_j + β_τ ε по эмпирическим остаткам.

    z: (d,) или (n, d); batch: (m, d).
    """
    if not (0.0 < tau < 1.0 and tau <= 1.0 - delta + 1e-12):
        raise ConfigurationError(f"tau={tau} outside (0, {1.0 - delta}]")
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch.shape[0] == 0:
        raise ConfigurationError("mc_score needs a non-empty residual batch")
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)

    centers = (1.0 - tau) * batch
    out = np.empty_like(z)
    for start in range(0, z.shape[0], SCORE_CHUNK):
        out[start:start + SCORE_CHUNK] = _weighted_score(z[start:start + SCORE_CHUNK], centers[None, :, :], tau)
    return out[0] if single else out


def _weighted_score(z: np.ndarray, centers: np.ndarray, tau: float) -> np.ndarray:
    diff = centers - z[:, None, :]
    weights = softmax(-np.sum(diff * diff, axis=2) / (2.0 * tau), axis=1)
    return np.einsum("nm,nmd->nd", weights, diff) / tau


def mc_score_rows(z: np.ndarray, tau: float, batches: np.ndarray, delta: float = 0.0) -> np.ndarray:
    """mc_score со своей мини-выборкой остатков для каждой строки z.

    z: (n, d); batches: (n, m, d).
    """
    if not (0.0 < tau < 1.0 and tau <= 1.0 - delta + 1e-12):
        raise ConfigurationError(f"tau={tau} outside (0, {1.0 - delta}]")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    batches = np.asarray(batches, dtype=np.float64)
    if batches.ndim != 3 or batches.shape[0] != z.shape[0] or batches.shape[1] == 0:
        raise ConfigurationError(f"Expected per-row batches of shape ({z.shape[0]}, m, d), got {batches.shape}")
    return _weighted_score(z, (1.0 - tau) * batches, tau)


ScoreFn = Callable[[np.ndarray, float], np.ndarray]


def reverse_ode_solve(z1: np.ndarray, schedule: DiffusionSchedule, score_fn: ScoreFn,
                      K: Optional[int] = None) -> np.ndarray:
    """Явный Эйлер для dZ = [b(τ)Z − ½σ²(τ)V(Z, τ)]dτ от τ = 1−δ назад к τ = δ"""
    K = schedule.K if K is None else K
    if K < 1:
        raise ConfigurationError("K must be >= 1")
    h = (1.0 - 2.0 * schedule.delta) / K
    z = np.array(z1, dtype=np.float64)
    tau = 1.0 - schedule.delta
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(K):
            v = score_fn(z, tau)
            z = z - h * (schedule.b(tau) * z - 0.5 * schedule.sigma2(tau) * v)
            if not np.all(np.isfinite(z)):
                raise NumericalError("Reverse ODE state became non-finite", tau=tau)
            tau = 1.0 - schedule.delta - (k + 1) * h
    return z


class LabeledPairs:
    def __init__(self, z: np.ndarray, y: np.ndarray, K: int, delta: float, seed: int):
        if z.shape != y.shape:
            raise ConfigurationError(f"Inputs {z.shape} and targets {y.shape} differ")
        self.z = z
        self.y = y
        self.K = K
        self.delta = delta
        self.seed = seed

    def __len__(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]

    def meta(self) -> LabeledPairsMeta:
        return LabeledPairsMeta(version=PAIRS_FORMAT_VERSION, n=len(self), d=self.dim,
                                K=self.K, delta=self.delta, seed=self.seed)

    def to_bytes(self) -> bytes:
        return np.concatenate([self.z.ravel(), self.y.ravel()]).astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, meta: LabeledPairsMeta) -> "LabeledPairs":
        if meta.version != PAIRS_FORMAT_VERSION:
            raise ConfigurationError(f"Unsupported labeled pairs version: {meta.version}")
        data = np.frombuffer(blob, dtype="<f8")
        if data.size != 2 * meta.n * meta.d:
            raise ConfigurationError("Labeled pairs file does not match its sidecar")
        z = data[:meta.n * meta.d].reshape(meta.n, meta.d).astype(np.float64)
        y = data[meta.n * meta.d:].reshape(meta.n, meta.d).astype(np.float64)
        return cls(z, y, meta.K, meta.delta, meta.seed)


def build_pairs(res: ResidualSet, n: int, schedule: DiffusionSchedule, K: Optional[int] = None,
                seed: int = 0, mc_batch: int = 1000, max_residuals: int = 100000,
                threads: int = 1, logger: Optional[RunLogger] = None) -> LabeledPairs:
    """n пар (z, y): z ~ N(0, I_d), y - решение обратного ODE из z"""
    if n < 1:
        raise ConfigurationError("build_pairs needs n >= 1")
    if len(res) == 0:
        raise ConfigurationError("Residual set is empty")
    K = schedule.K if K is None else K
    rng = np.random.default_rng(seed)

    pool = res.samples
    if len(pool) > max_residuals:
        pool = pool[rng.choice(len(pool), size=max_residuals, replace=False)]
        if logger:
            logger.info(f"Subsampled residuals {len(res)} -> {max_residuals} for pair construction")

    # ODE решается для стандартизованных остатков; цели возвращаются в исходный масштаб
    center = pool.mean(axis=0)
    spread = pool.std(axis=0)
    spread = np.where(spread > 1e-12, spread, 1.0)
    pool = (pool - center) / spread

    z = rng.standard_normal((n, res.dim))
    chunks = list(range(0, n, SCORE_CHUNK))

    def solve(index: int) -> np.ndarray:
        start = chunks[index]
        rows = z[start:start + SCORE_CHUNK]
        if len(pool) <= mc_batch:
            return reverse_ode_solve(rows, schedule, lambda state, tau: mc_score(state, tau, pool), K)
        # Своя мини-выборка остатков на каждое решение ODE (строку)
        chunk_rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
        batches = pool[chunk_rng.integers(0, len(pool), size=(len(rows), mc_batch))]
        return reverse_ode_solve(rows, schedule, lambda state, tau: mc_score_rows(state, tau, batches), K)

    with ThreadPoolExecutor(max_workers=threads) as executor:
        y = np.concatenate(list(executor.map(solve, range(len(chunks)))), axis=0)
    return LabeledPairs(z, center + spread * y, K, schedule.delta, seed)


class DecoderModel:
    """Ŝ(z) = scale · net(z) + mean"""

    def __init__(self, net: DenseNet, target_mean: np.ndarray, target_scale: np.ndarray,
                 iterations: int, lr: float, weight_decay: float, seed: int, final_loss: float):
        self.net = net
        self.target_mean = np.asarray(target_mean, dtype=np.float64)
        self.target_scale = np.asarray(target_scale, dtype=np.float64)
        self.iterations = iterations
        self.lr = lr
        self.weight_decay = weight_decay
        self.seed = seed
        self.final_loss = final_loss

    @property
    def dim(self) -> int:
        return self.net.input_size

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self.net(z) * self.target_scale + self.target_mean

    def to_payload(self) -> DecoderPayload:
        return DecoderPayload(
            version=DECODER_FORMAT_VERSION,
            network=self.net.to_payload(),
            target_mean=self.target_mean.tolist(),
            target_scale=self.target_scale.tolist(),
            iterations=self.iterations,
            lr=self.lr,
            weight_decay=self.weight_decay,
            seed=self.seed,
            final_loss=self.final_loss,
        )

    @classmethod
    def from_payload(cls, payload: DecoderPayload) -> "DecoderModel":
        if payload.version != DECODER_FORMAT_VERSION:
            raise ConfigurationError(f"Unsupported decoder format version: {payload.version}")
        return cls(DenseNet.from_payload(payload.network), np.array(payload.target_mean),
                   np.array(payload.target_scale), payload.iterations, payload.lr,
                   payload.weight_decay, payload.seed, payload.final_loss)

    def to_json(self) -> str:
        return json.dumps(self.to_payload().model_dump())

    @classmethod
    def from_json(cls, text: Union[str, bytes]) -> "DecoderModel":
        return cls.from_payload(DecoderPayload.model_validate(json.loads(text)))


def train_decoder(pairs: LabeledPairs, cfg: DecoderConfig,
                  logger: Optional[RunLogger] = None) -> DecoderModel:
    """MSE-регрессия d → hidden → d (tanh) на стандартизованных целях"""
    if len(pairs) == 0:
        raise ConfigurationError("train_decoder needs non-empty pairs")
    rng = np.random.default_rng(cfg.seed)
    d = pairs.dim
    net = DenseNet([d, cfg.hidden, d], "tanh", rng)

    mean = pairs.y.mean(axis=0)
    scale = pairs.y.std(axis=0)
    scale = np.where(scale > 1e-12, scale, 1.0)
    targets = (pairs.y - mean) / scale

    state = AdamState(net.n_params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    schedule = CosineSchedule(cfg.lr, cfg.iterations) if cfg.lr_schedule == "cosine" else None
    params = net.get_params()
    n = len(pairs)
    for it in range(cfg.iterations):
        if cfg.batch_size is not None and cfg.batch_size < n:
            idx = rng.integers(0, n, size=cfg.batch_size)
            z, t = pairs.z[idx], targets[idx]
        else:
            z, t = pairs.z, targets
        pred, cache = forward(net, z)
        resid = pred - t
        loss = float(np.mean(np.sum(resid * resid, axis=1)))
        if not math.isfinite(loss):
            raise NumericalError(f"Decoder loss became non-finite at iteration {it} "
                                 f"(lr={cfg.lr}, n={n}, d={d})")
        grad = backward(net, cache, 2.0 * resid / z.shape[0])
        lr = cosine_lr(schedule, it) if schedule else None
        params, ok = adam_step(state, params, grad, lr=lr)
        if not ok:
            raise NumericalError(f"Decoder gradient became non-finite at iteration {it}")
        net.set_params(params)

    final = net(pairs.z) * scale + mean
    final_loss = float(np.mean(np.sum((final - pairs.y) ** 2, axis=1)))
    if logger:
        logger.info(f"Decoder trained: {cfg.iterations} iterations, final loss {final_loss:.6g}")
    return DecoderModel(net, mean, scale, cfg.iterations, cfg.lr, cfg.weight_decay, cfg.seed, final_loss)


def sample_noise(model: DecoderModel, n: int, seed: int) -> np.ndarray:
    """Ŝ(z) для n свежих z ~ N(0, I_d)"""
    z = np.random.default_rng(seed).standard_normal((n, model.dim))
    return model(z)
