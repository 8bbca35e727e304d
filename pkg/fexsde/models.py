from typing import ClassVar, Dict, List, Optional, Any

from pydantic import BaseModel, Field, ConfigDict


class PayloadModel(BaseModel):
    """База для всех сохраняемых JSON-структур"""

    model_config = ConfigDict(extra="forbid")

    __artifact_name__: ClassVar[str] = ""

    @classmethod
    def get_artifact_name(cls) -> str:
        return cls.__artifact_name__ or cls.__name__.lower()


class ReadoutPayload(PayloadModel):
    w: List[float]
    b: float


class ExpressionPayload(PayloadModel):
    version: int
    dim: int = Field(ge=1)
    template: str
    ops: List[str]
    params: List[float]
    readout: ReadoutPayload

    __artifact_name__ = "expression"


class NetworkPayload(PayloadModel):
    version: int
    layer_sizes: List[int]
    activation: str
    weights: List[List[float]]
    biases: List[List[float]]

    __artifact_name__ = "network"


class DecoderPayload(PayloadModel):
    version: int
    network: NetworkPayload
    target_mean: List[float]
    target_scale: List[float]
    iterations: int
    lr: float
    weight_decay: float
    seed: int
    final_loss: float

    __artifact_name__ = "decoder"


class LabeledPairsMeta(PayloadModel):
    version: int
    n: int
    d: int
    K: int
    delta: float
    seed: int

    __artifact_name__ = "labeled_pairs"


class RunManifest(PayloadModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    benchmark: str
    data_hash: Optional[str] = None
    fit_hash: Optional[str] = None
    software_version: str
    seeds: Dict[str, int] = {}
    artifacts: Dict[str, str] = {}
    timings: Dict[str, float] = {}
    updated_at: Optional[str] = None

    __artifact_name__ = "manifest"


class Summary(PayloadModel):
    benchmark: str
    fit_hash: Optional[str] = None
    expressions: List[str]
    reference_expressions: List[str]
    noise_mean: List[float] = []
    noise_std: List[float] = []
    checks: Dict[str, bool] = {}
    metrics: Dict[str, Any] = {}

    __artifact_name__ = "summary"
