__version__ = "0.1.0"

from .config import RunConfig, SearchConfig, NoiseConfig, DecoderConfig, DataConfig, EvalConfig, EnvironmentConfig
from .errors import (
    FexSdeError, ConfigurationError, ExpressionParseError, ArtifactMissingError, NumericalError,
    CacheContractError,
)
from .expression import ExpressionInstance, OperatorSequence, build_template, evaluate, pretty_print
from .simulation import SdeSpec, benchmark, euler_maruyama, make_pairs, drift_targets
from .search import run_search, compute_score, CandidatePool, Controller
from .noise import DiffusionSchedule, mc_score, reverse_ode_solve, build_pairs, train_decoder, sample_noise
from .evaluation import LearnedSde, predict_step, rollout, effective_drift, effective_diffusion
from .pipeline import Pipeline


class SdeLearner:
    def __init__(self, cfg: RunConfig):
        self.config = cfg
        self.pipeline = Pipeline(self.config)

    async def generate(self):
        return await self.pipeline.run("generate")

    async def fit(self, stage: str = "full"):
        """Поиск сноса и, если stage == "full", обучение декодера шума"""
        return await self.pipeline.run("fit", stage)

    async def evaluate(self):
        return await self.pipeline.run("evaluate")

    async def reproduce(self, stage: str = "full"):
        return await self.pipeline.run("reproduce", stage)

    async def health_check(self):
        return await self.pipeline.checker.status()

    def get_metrics(self):
        return self.pipeline.metrics.get_metrics()


__all__ = [
    'SdeLearner', 'Pipeline', 'RunConfig', 'SearchConfig', 'NoiseConfig', 'DecoderConfig', 'DataConfig',
    'EvalConfig', 'EnvironmentConfig', 'FexSdeError', 'ConfigurationError', 'ExpressionParseError',
    'ArtifactMissingError', 'NumericalError', 'CacheContractError', 'ExpressionInstance',
    'OperatorSequence', 'build_template', 'evaluate', 'pretty_print', 'SdeSpec', 'benchmark',
    'euler_maruyama', 'make_pairs', 'drift_targets', 'run_search', 'compute_score', 'CandidatePool',
    'Controller', 'DiffusionSchedule', 'mc_score', 'reverse_ode_solve', 'build_pairs', 'train_decoder',
    'sample_noise', 'LearnedSde', 'predict_step', 'rollout', 'effective_drift', 'effective_diffusion',
]
