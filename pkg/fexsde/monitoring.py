import logging
import os
import time
from typing import Dict, Any, List, Optional
from functools import wraps


class RunLogger:
    def __init__(self, name: str = "fexsde", level: Optional[str] = None):
        self.logger = logging.getLogger(name)
        root = logging.getLogger("fexsde")
        root.setLevel(level or os.getenv("FEX_SDE_LOG_LEVEL", "INFO").upper())

        # Один обработчик на корневой логгер пакета
        if not root.handlers:
            handler = logging.StreamHandler()
            formatter = logging.Formatter(
                '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
            )
            handler.setFormatter(formatter)
            root.addHandler(handler)

    def child(self, suffix: str) -> "RunLogger":
        return RunLogger(f"{self.logger.name}.{suffix}")

    def info(self, message: str):
        self.logger.info(message)

    def debug(self, message: str):
        self.logger.debug(message)

    def warning(self, message: str):
        self.logger.warning(message)

    def log_stage(self, stage: str, duration: float, details: Optional[Dict[str, Any]] = None):
        self.logger.info(f"{stage} took {duration:.3f}s - {details or {}}")

    def log_error(self, stage: str, error: Exception):
        self.logger.error(f"Error in {stage}: {str(error)}")


class StageMetrics:
    def __init__(self):
        self.metrics: Dict[str, Any] = {
            "stages": 0,
            "total_time": 0.0,
            "errors": 0,
            "candidates_scored": 0,
            "nonfinite_candidates": 0,
            "excluded_trajectories": 0,
            "dropped_pairs": 0,
        }
        self.timings: Dict[str, float] = {}

    def record_stage(self, stage: str, duration: float):
        self.metrics["stages"] += 1
        self.metrics["total_time"] += duration
        self.timings[stage] = self.timings.get(stage, 0.0) + duration

    def increment(self, counter: str, amount: int = 1):
        self.metrics[counter] = self.metrics.get(counter, 0) + amount

    def record_error(self):
        self.metrics["errors"] += 1

    def get_metrics(self) -> Dict[str, Any]:
        return {**self.metrics, "timings": dict(self.timings)}

    def reset_metrics(self):
        self.metrics = {k: 0 if isinstance(v, (int, float)) else v for k, v in self.metrics.items()}
        self.timings = {}


def timed_stage(func):
    """Замер времени асинхронной стадии пайплайна"""
    @wraps(func)
    async def wrapper(self, *args, **kwargs):
        start_time = time.perf_counter()
        stage = func.__name__

        try:
            result = await func(self, *args, **kwargs)
            duration = time.perf_counter() - start_time

            if hasattr(self, 'logger'):
                self.logger.log_stage(stage, duration)
            if hasattr(self, 'metrics'):
                self.metrics.record_stage(stage, duration)

            return result
        except Exception as e:
            if hasattr(self, 'logger'):
                self.logger.log_error(stage, e)
            if hasattr(self, 'metrics'):
                self.metrics.record_error()
            raise
    return wrapper


class SearchHistory:
    """Построчный журнал поиска: iteration, best_score, pool_min_score, entropy"""

    columns = ["dim", "iteration", "best_score", "pool_min_score", "entropy"]

    def __init__(self):
        self.rows: List[Dict[str, float]] = []

    def record(self, dim: int, iteration: int, best_score: float,
               pool_min_score: float, entropy: float):
        self.rows.append({
            "dim": dim,
            "iteration": iteration,
            "best_score": best_score,
            "pool_min_score": pool_min_score,
            "entropy": entropy,
        })

    def for_dim(self, dim: int) -> List[Dict[str, float]]:
        return [r for r in self.rows if r["dim"] == dim]

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(
                f"{row['dim']},{row['iteration']},{row['best_score']:.10g},"
                f"{row['pool_min_score']:.10g},{row['entropy']:.10g}"
            )
        return "\n".join(lines) + "\n"
