import io
import math
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import gaussian_kde, norm

from .errors import ConfigurationError, NumericalError
from .expression import ExpressionInstance
from .monitoring import RunLogger
from .noise import DecoderModel
from .simulation import SdeSpec

MIN_DENSITY_SAMPLES = 100


class LearnedSde:
    """x_{t+Δt} = x_t + Δt·D̂(x_t) + Ŝ(z); decoder=None означает нулевой шум"""

    def __init__(self, drift: Sequence[ExpressionInstance], decoder: Optional[DecoderModel], dt: float):
        if decoder is not None and decoder.dim != len(drift):
            raise ConfigurationError(f"Decoder dimension {decoder.dim} != drift dimension {len(drift)}")
        if dt <= 0:
            raise ConfigurationError("dt must be positive")
        self.drift = list(drift)
        self.decoder = decoder
        self.dt = dt

    @property
    def dim(self) -> int:
        return len(self.drift)

    def drift_values(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(x)
        return np.column_stack([expr.predict(x) for expr in self.drift])

    def noise(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.decoder is None:
            return np.zeros((n, self.dim))
        return self.decoder(rng.standard_normal((n, self.dim)))


def predict_step(model: LearnedSde, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    states = np.atleast_2d(x)
    if not np.all(np.isfinite(states)):
        raise ConfigurationError("predict_step needs a finite state")
    with np.errstate(over="ignore", invalid="ignore"):
        nxt = states + model.dt * model.drift_values(states) + model.noise(rng, states.shape[0])
    if not np.all(np.isfinite(nxt)):
        raise NumericalError("Learned model produced a non-finite state")
    return nxt[0] if single else nxt


class EnsembleStats:
    def __init__(self, times: np.ndarray, mean: np.ndarray, std: np.ndarray, n_real: int,
                 snapshots: Optional[Dict[float, np.ndarray]] = None):
        self.times = times
        self.mean = mean
        self.std = std
        self.n_real = n_real
        self.snapshots = snapshots or {}

    @property
    def standard_error(self) -> np.ndarray:
        return self.std / math.sqrt(self.n_real)

    def to_csv(self) -> str:
        d = self.mean.shape[1]
        header = ["t"] + [f"mean_x{j + 1}" for j in range(d)] + [f"std_x{j + 1}" for j in range(d)]
        return _table_csv(header, np.column_stack([self.times, self.mean, self.std]))


def _snapshot_steps(times: Optional[Sequence[float]], dt: float, steps: int) -> Dict[int, float]:
    marks = {}
    for t in times or []:
        k = int(round(t / dt))
        if not 0 <= k <= steps:
            raise ConfigurationError(f"Snapshot time {t} outside rollout horizon {steps * dt}")
        marks[k] = float(t)
    return marks


def rollout(model: LearnedSde, x0: Sequence[float], steps: int, n_real: int, seed: int,
            snapshot_times: Optional[Sequence[float]] = None) -> EnsembleStats:
    """Ансамбль из n_real реализаций; весь ансамбль из одного генератора"""
    if steps < 1 or n_real < 1:
        raise ConfigurationError("rollout needs steps >= 1 and n_real >= 1")
    rng = np.random.default_rng(seed)
    x = np.tile(np.asarray(x0, dtype=np.float64), (n_real, 1))
    marks = _snapshot_steps(snapshot_times, model.dt, steps)

    mean = np.empty((steps + 1, model.dim))
    std = np.empty((steps + 1, model.dim))
    snapshots = {}
    for k in range(steps + 1):
        if k > 0:
            x = predict_step(model, x, rng)
        mean[k] = x.mean(axis=0)
        std[k] = x.std(axis=0)
        if k in marks:
            snapshots[marks[k]] = x.copy()
    return EnsembleStats(np.arange(steps + 1) * model.dt, mean, std, n_real, snapshots)


def reference_rollout(spec: SdeSpec, x0: Sequence[float], steps: int, n_real: int, dt: float,
                      seed: int, refine: int = 10,
                      snapshot_times: Optional[Sequence[float]] = None) -> EnsembleStats:
    """Эталон: Эйлер–Маруяма для истинного SDE с шагом dt/refine"""
    if steps < 1 or n_real < 1 or refine < 1:
        raise ConfigurationError("reference_rollout needs steps, n_real, refine >= 1")
    rng = np.random.default_rng(seed)
    h = dt / refine
    x = np.tile(np.asarray(x0, dtype=np.float64), (n_real, 1))
    marks = _snapshot_steps(snapshot_times, dt, steps)

    mean = np.empty((steps + 1, spec.dim))
    std = np.empty((steps + 1, spec.dim))
    snapshots = {}
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(steps + 1):
            if k > 0:
                for _ in range(refine):
                    x = spec.step(x, spec.draw_noise(rng, (n_real, spec.noise_dim)), h)
            mean[k] = x.mean(axis=0)
            std[k] = x.std(axis=0)
            if k in marks:
                snapshots[marks[k]] = x.copy()
    return EnsembleStats(np.arange(steps + 1) * dt, mean, std, n_real, snapshots)


class EffectiveCoefficients:
    def __init__(self, drift: np.ndarray, diffusion: np.ndarray, drift_se: np.ndarray):
        self.drift = drift
        self.diffusion = diffusion
        self.drift_se = drift_se


def effective_coefficients(model: LearnedSde, x: Sequence[float], M: int, seed: int) -> EffectiveCoefficients:
    """μ̂ = mean((x̂_Δt − x)/Δt), σ̂ = std(x̂_Δt)/√Δt по M реализациям"""
    if M < 2:
        raise ConfigurationError("effective coefficients need M >= 2")
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    nxt = predict_step(model, np.tile(x, (M, 1)), rng)
    increments = (nxt - x) / model.dt
    return EffectiveCoefficients(
        increments.mean(axis=0),
        nxt.std(axis=0) / math.sqrt(model.dt),
        increments.std(axis=0) / math.sqrt(M),
    )


def effective_drift(model: LearnedSde, x: Sequence[float], M: int, seed: int = 0) -> np.ndarray:
    return effective_coefficients(model, x, M, seed).drift


def effective_diffusion(model: LearnedSde, x: Sequence[float], M: int, seed: int = 0) -> np.ndarray:
    return effective_coefficients(model, x, M, seed).diffusion


def sweep_grid(low: Sequence[float], high: Sequence[float], points: int) -> np.ndarray:
    """Равномерная сетка по каждой оси; в d > 1 - по диагонали прямоугольника"""
    low = np.asarray(low, dtype=np.float64)
    high = np.asarray(high, dtype=np.float64)
    s = np.linspace(0.0, 1.0, points)[:, None]
    return low + s * (high - low)


def effective_sweep(model: LearnedSde, grid: np.ndarray, M: int, seed: int) -> EffectiveCoefficients:
    drift, diffusion, se = [], [], []
    for i, x in enumerate(np.atleast_2d(grid)):
        coef = effective_coefficients(model, x, M, seed + i)
        drift.append(coef.drift)
        diffusion.append(coef.diffusion)
        se.append(coef.drift_se)
    return EffectiveCoefficients(np.array(drift), np.array(diffusion), np.array(se))


def true_effective_coefficients(spec: SdeSpec, grid: np.ndarray, dt: float) -> EffectiveCoefficients:
    """Точные одношаговые μ̂, σ̂ истинного SDE (включая среднее вынуждающей силы)"""
    grid = np.atleast_2d(grid)
    sigma = spec.diffusion(grid)
    drift = spec.drift(grid) + sigma.sum(axis=2) * spec.noise_mean / math.sqrt(dt)
    diffusion = np.sqrt(np.sum(sigma * sigma, axis=2)) * spec.noise_std
    return EffectiveCoefficients(drift, diffusion, np.zeros_like(drift))


class DensityEstimate:
    def __init__(self, grid: np.ndarray, values: np.ndarray, bandwidth: float):
        self.grid = grid
        self.values = values
        self.bandwidth = bandwidth

    @property
    def integral(self) -> float:
        return float(trapezoid(self.values, self.grid))

    def to_csv(self) -> str:
        return _table_csv(["x", "density"], np.column_stack([self.grid, self.values]))


def conditional_density(samples: np.ndarray, grid: np.ndarray, bandwidth: Union[str, float] = "silverman",
                        logger: Optional[RunLogger] = None) -> DensityEstimate:
    """Гауссово KDE на сетке, нормированное по правилу трапеций"""
    samples = np.asarray(samples, dtype=np.float64).ravel()
    grid = np.asarray(grid, dtype=np.float64)
    if samples.size < MIN_DENSITY_SAMPLES:
        raise ConfigurationError(f"Density estimate needs >= {MIN_DENSITY_SAMPLES} samples, got {samples.size}")
    if grid.size < 2:
        raise ConfigurationError("Density grid needs at least two points")

    spread = float(np.std(samples))
    if spread == 0.0:
        width = float(np.min(np.diff(grid)))
        if logger:
            logger.warning(f"Degenerate samples at {samples[0]:.6g}; using a narrow estimate of width {width:.3g}")
        values = norm.pdf(grid, loc=samples[0], scale=width)
        factor = width
    else:
        kde = gaussian_kde(samples, bw_method=bandwidth)
        values = kde(grid)
        factor = float(np.sqrt(kde.covariance[0, 0]))

    total = trapezoid(values, grid)
    if not total > 0:
        raise ConfigurationError("Density grid does not cover the samples")
    return DensityEstimate(grid, values / total, factor)


def density_grid(samples: np.ndarray, points: int) -> np.ndarray:
    """Сетка, покрывающая выборку с запасом в три std"""
    low, high = float(np.min(samples)), float(np.max(samples))
    pad = 3.0 * max(float(np.std(samples)), 1e-3)
    return np.linspace(low - pad, high + pad, points)


def density_evolution(model: LearnedSde, x0: Sequence[float], times: Sequence[float], n_real: int,
                      seed: int, grid: Optional[np.ndarray] = None, component: int = 0,
                      points: int = 200, logger: Optional[RunLogger] = None) -> Dict[float, DensityEstimate]:
    """Условные плотности x_t | x_0 на нескольких горизонтах; общая сетка для всех t"""
    steps = int(round(max(times) / model.dt))
    stats = rollout(model, x0, steps, n_real, seed, snapshot_times=times)
    samples = {float(t): stats.snapshots[float(t)][:, component] for t in times}
    if grid is None:
        grid = density_grid(np.concatenate(list(samples.values())), points)
    return {t: conditional_density(s, grid, logger=logger) for t, s in samples.items()}


def reference_density_evolution(spec: SdeSpec, x0: Sequence[float], times: Sequence[float], n_real: int,
                                dt: float, seed: int, grid: np.ndarray, refine: int = 10, component: int = 0,
                                logger: Optional[RunLogger] = None) -> Dict[float, DensityEstimate]:
    """Те же плотности для истинного SDE на заданной сетке"""
    steps = int(round(max(times) / dt))
    stats = reference_rollout(spec, x0, steps, n_real, dt, seed, refine, snapshot_times=times)
    return {float(t): conditional_density(stats.snapshots[float(t)][:, component], grid, logger=logger)
            for t in times}


class FunctionComparison:
    def __init__(self, grid: np.ndarray, learned: np.ndarray, true: np.ndarray,
                 in_domain: np.ndarray):
        self.grid = grid
        self.learned = learned
        self.true = true
        self.in_domain = in_domain

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.learned - self.true)

    @property
    def l2_error(self) -> float:
        return float(np.sqrt(np.mean(self.errors ** 2)))

    @property
    def max_error(self) -> float:
        return float(np.max(self.errors))

    def table(self) -> List[Dict[str, float]]:
        rows = []
        for i in range(self.grid.shape[0]):
            row = {f"x{j + 1}": float(self.grid[i, j]) for j in range(self.grid.shape[1])}
            row.update(learned=float(self.learned[i]), true=float(self.true[i]),
                       error=float(self.errors[i]), in_training_domain=bool(self.in_domain[i]))
            rows.append(row)
        return rows

    def to_csv(self) -> str:
        d = self.grid.shape[1]
        header = [f"x{j + 1}" for j in range(d)] + ["learned", "true", "error", "in_training_domain"]
        data = np.column_stack([self.grid, self.learned, self.true, self.errors, self.in_domain.astype(float)])
        return _table_csv(header, data)


def compare_functions(learned: Callable[[np.ndarray], np.ndarray], true: Callable[[np.ndarray], np.ndarray],
                      grid: np.ndarray, train_low: Optional[Sequence[float]] = None,
                      train_high: Optional[Sequence[float]] = None) -> FunctionComparison:
    """Ошибки learned против true на сетке; отмечает точки внутри области обучения"""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim == 1:
        grid = grid[:, None]
    lv = np.asarray(learned(grid), dtype=np.float64).reshape(grid.shape[0])
    tv = np.asarray(true(grid), dtype=np.float64).reshape(grid.shape[0])
    if train_low is None or train_high is None:
        in_domain = np.zeros(grid.shape[0], dtype=bool)
    else:
        in_domain = np.all((grid >= np.asarray(train_low)) & (grid <= np.asarray(train_high)), axis=1)
    return FunctionComparison(grid, lv, tv, in_domain)


def _table_csv(header: List[str], data: np.ndarray) -> str:
    buffer = io.StringIO()
    np.savetxt(buffer, np.atleast_2d(data), delimiter=",", header=",".join(header), comments="", fmt="%.10g")
    return buffer.getvalue()
