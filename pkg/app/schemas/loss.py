"""
Loss Schemas - weights of the multi-level restoration objective
"""
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field


class LossWeights(BaseModel):
    """loss.*: λ weights plus the cosine/L2 variant switches used by the loss ablation"""
    model_config = ConfigDict(extra="forbid")

    lambda_lpips: float = Field(2.0, ge=0, description="Perceptual weight inside L_res (full scale: 2)")
    lambda_res: float = Field(1.0, ge=0)
    lambda_id: float = Field(1.0, ge=0)
    lambda_fs: float = Field(1.0, ge=0)
    id_variant: Literal["cosine", "l2"] = "cosine"
    fs_variant: Literal["cosine", "l2"] = "cosine"
    provider_seed: int = Field(1234, ge=0, description="Seed of the fixed feature networks")
