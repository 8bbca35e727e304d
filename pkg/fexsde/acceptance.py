from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import stats

from .evaluation import FunctionComparison
from .expression import ExpressionInstance, polynomial_terms, trig_features

Terms = Dict[Tuple[int, ...], float]


def _within(value: Optional[float], low: float, high: float) -> bool:
    return value is not None and low <= value <= high


def _coef(terms: Optional[Terms], monom: Tuple[int, ...]) -> Optional[float]:
    if terms is None:
        return None
    return terms.get(monom, 0.0)


def _others_small(terms: Optional[Terms], kept: Sequence[Tuple[int, ...]], bound: float) -> bool:
    if terms is None:
        return False
    return all(abs(c) < bound for m, c in terms.items() if m not in kept)


def _noise_checks(samples: Optional[np.ndarray], std_target: float, std_tol: float,
                  mean_bound: Optional[float] = None,
                  skew_range: Optional[Tuple[float, float]] = None) -> Dict[str, bool]:
    if samples is None:
        return {}
    samples = np.atleast_2d(samples)
    std = float(samples[:, 0].std())
    checks = {"noise_std": abs(std - std_target) <= std_tol * std_target}
    if mean_bound is not None:
        checks["noise_mean"] = abs(float(samples[:, 0].mean())) < mean_bound
    if skew_range is not None:
        checks["noise_skewness"] = _within(float(stats.skew(samples[:, 0])), *skew_range)
    return checks


def _generalization(sweep: Optional[FunctionComparison], drift_se: Optional[np.ndarray],
                    bound: Callable[[np.ndarray], np.ndarray],
                    diffusion: Optional[np.ndarray]) -> Dict[str, bool]:
    checks = {}
    if sweep is not None:
        se = np.zeros(sweep.grid.shape[0]) if drift_se is None else np.asarray(drift_se).reshape(-1)
        allowed = bound(sweep.grid[:, 0]) + 3.0 * se
        checks["effective_drift_bound"] = bool(np.all(sweep.errors <= allowed))
    if diffusion is not None:
        values = np.asarray(diffusion).reshape(-1)
        mean = float(np.mean(values))
        checks["effective_diffusion_constant"] = mean > 0 and float(np.ptp(values)) <= 0.1 * mean
    return checks


def acceptance_checks(name: str, expressions: List[ExpressionInstance],
                      noise_samples: Optional[np.ndarray] = None,
                      drift_sweep: Optional[FunctionComparison] = None,
                      drift_se: Optional[np.ndarray] = None,
                      diffusion_sweep: Optional[np.ndarray] = None) -> Dict[str, bool]:
    """Именованные проверки качества для эталонных задач; для прочих - пустой словарь"""
    checks: Dict[str, bool] = {}
    terms = [polynomial_terms(e) for e in expressions]

    if name == "ou":
        t = terms[0]
        checks["drift_degree"] = t is not None and all(sum(m) <= 1 for m in t)
        checks["drift_slope"] = _within(_coef(t, (1,)), -1.05, -0.95)
        checks["drift_intercept"] = _within(_coef(t, (0,)), 1.15, 1.25)
        checks.update(_noise_checks(noise_samples, 0.03, 0.10, mean_bound=0.005))
        checks.update(_generalization(drift_sweep, drift_se, lambda x: 0.05 * np.abs(x) + 0.05,
                                      diffusion_sweep))
    elif name == "double_well":
        t = terms[0]
        checks["drift_cubic"] = _within(_coef(t, (3,)), -1.1, -0.9)
        checks["drift_linear"] = _within(_coef(t, (1,)), 0.85, 1.1)
        const = _coef(t, (0,))
        checks["drift_constant"] = const is not None and abs(const) < 0.05
        checks.update(_noise_checks(noise_samples, 0.05, 0.10))
        checks.update(_generalization(drift_sweep, drift_se,
                                      lambda x: 0.1 * np.abs(x) ** 3 + 0.15 * np.abs(x) + 0.05,
                                      diffusion_sweep))
    elif name == "trig":
        features = trig_features(expressions[0])
        freq = abs(features["frequency"]) if features else None
        amp = abs(features["amplitude"]) if features else None
        checks["drift_frequency"] = _within(freq, 6.0, 6.55)
        checks["drift_amplitude"] = _within(amp, 0.85, 1.25)
        checks.update(_noise_checks(noise_samples, 0.08, 0.10))
    elif name == "exp_noise":
        t = terms[0]
        checks["drift_linear"] = _within(_coef(t, (1,)), -2.1, -1.9)
        checks.update(_noise_checks(noise_samples, 0.01, 0.15, skew_range=(1.2, 2.8)))
    elif name == "ol2d":
        t1, t2 = terms[0], terms[1] if len(terms) > 1 else None
        checks["drift1_cubic"] = _within(_coef(t1, (3, 0)), -10.5, -9.4)
        checks["drift1_linear"] = _within(_coef(t1, (1, 0)), 9.4, 10.5)
        checks["drift1_spurious"] = _others_small(t1, [(3, 0), (1, 0)], 0.5)
        checks["drift2_linear"] = _within(_coef(t2, (0, 1)), -10.3, -9.7)
        checks["drift2_spurious"] = _others_small(t2, [(0, 1)], 0.5)
    return checks
