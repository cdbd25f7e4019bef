"""
Run Configuration Schema - every knob of every stage under dotted keys
"""
from pydantic import BaseModel, ConfigDict, Field

from app.schemas.data import DataConfig
from app.schemas.loss import LossWeights
from app.schemas.metrics import EvalConfig
from app.schemas.training import (
    AdapterConfig,
    CodecConfig,
    LoRAConfig,
    OptimizerConfig,
    PriorConfig,
    Stage1Schedule,
    Stage2Schedule,
)


class RunConfig(BaseModel):
    """Fully resolved configuration of one run; unknown keys are rejected"""
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    output_dir: str = "runs/default"
    data: DataConfig = Field(default_factory=DataConfig)
    codec: CodecConfig = Field(default_factory=CodecConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    adapter: AdapterConfig = Field(default_factory=AdapterConfig)
    stage1: Stage1Schedule = Field(default_factory=Stage1Schedule)
    lora: LoRAConfig = Field(default_factory=LoRAConfig)
    stage2: Stage2Schedule = Field(default_factory=Stage2Schedule)
    loss: LossWeights = Field(default_factory=LossWeights)
    optim: OptimizerConfig = Field(default_factory=OptimizerConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
