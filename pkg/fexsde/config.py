import hashlib
import json
import os
from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError


class EnvironmentConfig:
    def __init__(self):
        self.FEX_SDE_SEED = os.getenv('FEX_SDE_SEED')
        self.FEX_SDE_OUT = os.getenv('FEX_SDE_OUT')
        self.FEX_SDE_THREADS = os.getenv('FEX_SDE_THREADS')
        self.FEX_SDE_LOG_LEVEL = os.getenv('FEX_SDE_LOG_LEVEL', 'INFO').upper()

    def get_seed(self) -> Optional[int]:
        if self.FEX_SDE_SEED is None or self.FEX_SDE_SEED == '':
            return None
        try:
            return int(self.FEX_SDE_SEED)
        except ValueError:
            raise ConfigurationError(f"FEX_SDE_SEED must be an integer, got {self.FEX_SDE_SEED!r}")

    def get_threads(self) -> Optional[int]:
        if not self.FEX_SDE_THREADS:
            return None
        try:
            return int(self.FEX_SDE_THREADS)
        except ValueError:
            raise ConfigurationError(f"FEX_SDE_THREADS must be an integer, got {self.FEX_SDE_THREADS!r}")

    def get_out_dir(self, default: str) -> str:
        out_dir = self.FEX_SDE_OUT or default
        if not os.path.exists(out_dir):
            os.makedirs(out_dir, exist_ok=True)
        return out_dir


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DataConfig(Section):
    dt: float = Field(0.01, gt=0)
    n_steps: int = Field(100, ge=1)
    n_trajectories: Optional[int] = Field(None, ge=1)
    seed: int = 0


class SearchConfig(Section):
    depth: int = Field(3, ge=1, le=3)
    epsilon: float = Field(0.1, ge=0, le=1)
    batch_size: int = Field(2, ge=1)
    controller_lr: float = Field(2e-3, gt=0)
    controller_hidden: int = Field(0, ge=0)
    iterations: Optional[int] = Field(None, ge=1)
    quantile: float = Field(0.5, gt=0, le=1)
    pool_size: int = Field(30, ge=1)

    score_optimizer: Literal["adam", "sgd"] = "adam"
    score_lr: float = Field(8e-3, gt=0)
    score_iters: int = Field(10000, ge=1)
    score_batch: Optional[int] = Field(5000, ge=1)
    score_eval_every: int = Field(500, ge=1)
    use_lbfgs: bool = True
    lbfgs_iters: int = Field(20, ge=0)
    lbfgs_max_points: int = Field(20000, ge=1)
    jitter: float = Field(0.1, ge=0)

    refine_lr: float = Field(5e-3, gt=0)
    refine_iters: int = Field(80000, ge=0)
    refine_batch: Optional[int] = Field(None, ge=1)
    refine_top_k: Optional[int] = Field(None, ge=1)

    center_noise: Optional[bool] = None
    noise_bins: int = Field(50, ge=2)
    seed: int = 0


class DecoderConfig(Section):
    hidden: int = Field(50, ge=1)
    lr: float = Field(1e-2, gt=0)
    weight_decay: float = Field(1e-6, ge=0)
    iterations: int = Field(2000, ge=1)
    batch_size: Optional[int] = Field(None, ge=1)
    lr_schedule: Literal["constant", "cosine"] = "constant"
    seed: int = 0


class NoiseConfig(Section):
    K: int = Field(10000, ge=1)
    n_pairs: int = Field(10000, ge=1)
    mc_batch: int = Field(1000, ge=1)
    max_residuals: int = Field(100000, ge=1)
    seed: int = 0
    decoder: DecoderConfig = Field(default_factory=DecoderConfig)


class EvalConfig(Section):
    n_realizations: int = Field(10000, ge=1)
    sweep_points: int = Field(201, ge=2)
    kde_points: int = Field(200, ge=10)
    reference_refine: int = Field(10, ge=1)
    x0: Optional[List[List[float]]] = Field(None, min_length=1)
    t_eval: Optional[float] = Field(None, gt=0)
    density_times: Optional[List[float]] = None
    plots: bool = False
    seed: int = 0


class CustomSdeConfig(Section):
    name: str = "custom"
    drift: List[str]
    diffusion: List[List[float]]
    noise_kind: Literal["gaussian", "exponential"] = "gaussian"
    init_low: List[float]
    init_high: List[float]
    n_trajectories: int = Field(10000, ge=1)
    t_eval: float = Field(1.0, gt=0)
    eval_x0: List[List[float]] = Field(min_length=1)
    sweep_low: List[float]
    sweep_high: List[float]
    search_iterations: int = Field(100, ge=1)

    @model_validator(mode="after")
    def check_dims(self):
        d = len(self.drift)
        for name in ("init_low", "init_high", "sweep_low", "sweep_high"):
            if len(getattr(self, name)) != d:
                raise ValueError(f"{name} must have {d} entries")
        if any(len(x0) != d for x0 in self.eval_x0):
            raise ValueError(f"every eval_x0 entry must have {d} entries")
        return self


# Уменьшенные настройки для настольного запуска (кроме сокращения L)
DESK_SEARCH = {"score_iters": 3000, "refine_iters": 20000, "refine_batch": 20000, "refine_top_k": 10}
DESK_NOISE = {"K": 2000, "n_pairs": 10000}
DESK_TRAJECTORIES = {"ou": 2000, "trig": 2000, "double_well": 2000, "ol2d": 5000, "exp_noise": 2000}
DESK_ITERATIONS = {"ou": 150, "trig": 150, "double_well": 600, "ol2d": 150, "exp_noise": 150}


class RunConfig(Section):
    benchmark: Optional[str] = None
    custom: Optional[CustomSdeConfig] = None
    out_dir: str = "runs"
    threads: int = Field(1, ge=1)
    scale: Literal["full", "desk"] = "full"
    data: DataConfig = Field(default_factory=DataConfig)
    search: SearchConfig = Field(default_factory=SearchConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def check_source(self):
        if self.custom is None and not self.benchmark:
            raise ValueError("either benchmark or custom must be given")
        return self

    @property
    def name(self) -> str:
        return self.custom.name if self.custom else self.benchmark

    def with_seed(self, seed: int) -> "RunConfig":
        """Один сид распространяется на все стадии"""
        updated = self.model_copy(deep=True)
        updated.data.seed = seed
        updated.search.seed = seed
        updated.noise.seed = seed
        updated.noise.decoder.seed = seed
        updated.eval.seed = seed
        return updated

    def apply_scale(self) -> "RunConfig":
        if self.scale != "desk":
            return self
        updated = self.model_copy(deep=True)
        fields_set = updated.search.model_fields_set
        for key, value in DESK_SEARCH.items():
            if key not in fields_set:
                setattr(updated.search, key, value)
        for key, value in DESK_NOISE.items():
            if key not in updated.noise.model_fields_set:
                setattr(updated.noise, key, value)
        if updated.custom is None and updated.benchmark in DESK_TRAJECTORIES:
            if updated.data.n_trajectories is None:
                updated.data.n_trajectories = DESK_TRAJECTORIES[updated.benchmark]
            if updated.search.iterations is None:
                updated.search.iterations = DESK_ITERATIONS[updated.benchmark]
        return updated

    def set_value(self, assignment: str) -> "RunConfig":
        """Применяет "section.field=value"; value разбирается как JSON, иначе строка"""
        if "=" not in assignment:
            raise ConfigurationError(f"Expected section.field=value, got {assignment!r}")
        path, raw = assignment.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw

        # exclude_unset сохраняет различие "задано явно" / "по умолчанию" для apply_scale
        data = self.model_dump(exclude_unset=True)
        target = data
        keys = path.strip().split(".")
        for key in keys[:-1]:
            target = target.setdefault(key, {})
            if not isinstance(target, dict):
                raise ConfigurationError(f"Unknown config section: {path}")
        target[keys[-1]] = value
        return load_config_dict(data)


def load_config_dict(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def read_config_file(path: Optional[str]) -> Dict[str, Any]:
    """Сырой JSON файла конфигурации; без пути - пустой словарь"""
    if not path:
        return {}
    if not os.path.exists(path):
        raise ConfigurationError(f"Config file not found: {path}")
    with open(path, "r") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise ConfigurationError(f"Config file {path} must contain a JSON object")
    return data


def load_config(path: Optional[str], benchmark: Optional[str] = None) -> RunConfig:
    data = read_config_file(path)
    if benchmark:
        data["benchmark"] = benchmark
    return load_config_dict(data)


def canonical_hash(payload: Any) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def data_hash(cfg: RunConfig) -> str:
    source = cfg.custom.model_dump() if cfg.custom else cfg.benchmark
    return canonical_hash({"source": source, "data": cfg.data.model_dump()})


def fit_hash(cfg: RunConfig) -> str:
    return canonical_hash({
        "data_hash": data_hash(cfg),
        "search": cfg.search.model_dump(),
        "noise": cfg.noise.model_dump(),
    })
