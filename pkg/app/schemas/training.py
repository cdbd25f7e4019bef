"""
Training Schemas - model shapes and schedules for every trainable stage.

Defaults are desk-scale; full-scale values are noted in each description.
"""
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class CodecConfig(BaseModel):
    """codec.*: toy autoencoder standing in for the frozen VAE"""
    model_config = ConfigDict(extra="forbid")

    latent_channels: int = Field(4, ge=1)
    stride: int = Field(4, ge=2, description="Image-to-latent downscale, power of two")
    hidden_widths: List[int] = Field(default_factory=lambda: [32, 64, 64], min_length=2)
    learning_rate: float = Field(2e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(30, ge=0)
    seed: Optional[int] = Field(None, ge=0, description="Defaults to a substream of the global seed")
    min_images: int = Field(64, ge=1)
    max_final_loss: float = Field(5e-3, gt=0, description="Final train MSE above this is a training failure")

    @model_validator(mode="after")
    def validate_stride(self):
        if self.stride & (self.stride - 1):
            raise ValueError("stride must be a power of two")
        expected = 2 ** (len(self.hidden_widths) - 1)
        if expected != self.stride:
            raise ValueError(
                f"hidden_widths defines {len(self.hidden_widths) - 1} downsampling stages "
                f"(stride {expected}), but stride={self.stride}"
            )
        return self


class PriorConfig(BaseModel):
    """prior.*: one-step latent restorer pretrained on noisy HQ latents"""
    model_config = ConfigDict(extra="forbid")

    hidden_channels: int = Field(64, ge=4)
    context_dim: int = Field(32, ge=4)
    vocab_size: int = Field(512, ge=8)
    prompt: str = Field("face, high quality", min_length=1)
    noise_max: float = Field(0.5, ge=0, description="Pretraining noise σ ~ U[0, noise_max]")
    learning_rate: float = Field(1e-3, gt=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(30, ge=0)


class AdapterConfig(BaseModel):
    """adapter.*: codebook alignment adapter shape"""
    model_config = ConfigDict(extra="forbid")

    codebook_size: int = Field(256, ge=1, description="K (full scale: 1024)")
    code_dim: int = Field(64, ge=1, description="d (full scale: 256)")
    hidden_channels: int = Field(64, ge=1)
    commitment_weight: float = Field(0.25, ge=0, description="β; 0 reproduces the plain L1 objective")


class Stage1Schedule(BaseModel):
    """stage1.*: alignment adapter training"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(1e-4, gt=0, description="full scale: 1e-4")
    batch_size: int = Field(16, ge=1, description="full scale: 16")
    epochs: int = Field(100, ge=0, description="full scale: 100")
    seed: Optional[int] = Field(None, ge=0)


class LoRAConfig(BaseModel):
    """lora.*: low-rank adaptation of the restorer"""
    model_config = ConfigDict(extra="forbid")

    rank: int = Field(4, ge=1, description="full scale: 4")
    alpha: Optional[float] = Field(None, gt=0, description="Defaults to rank (scale 1)")
    target: str = Field("conv", description="Layer-name substring; '' targets every layer")

    @property
    def effective_alpha(self) -> float:
        return float(self.alpha) if self.alpha is not None else float(self.rank)


class Stage2Schedule(BaseModel):
    """stage2.*: LoRA fine-tuning under the multi-level loss"""
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = Field(5e-5, gt=0, description="full scale: 5e-5")
    batch_size: int = Field(2, ge=1, description="full scale: 2")
    total_steps: int = Field(2000, ge=0, description="full scale: 17,000")
    seed: Optional[int] = Field(None, ge=0)
    align: bool = Field(True, description="Feed aligned latents (False feeds LQ latents directly)")
    prune: bool = Field(True, description="Replace prompt/timestep modules by precomputed tensors")
    log_every: int = Field(100, ge=1)


class OptimizerConfig(BaseModel):
    """optim.*: Adam settings shared by every stage"""
    model_config = ConfigDict(extra="forbid")

    beta1: float = Field(0.9, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(0.0, ge=0)
