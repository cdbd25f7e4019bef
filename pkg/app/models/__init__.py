"""
Torch modules of the restoration pipeline
"""
from app.models.alignment import AlignmentOutput, Codebook, LatentAlignmentAdapter
from app.models.codec import ToyCodec
from app.models.embedders import (
    EmbeddingProvider,
    IdentityEmbedding,
    LossProviders,
    PerceptualDistance,
    PixelEmbedding,
    RandomConvFeatures,
    StructureEmbedding,
)
from app.models.lora import LoRAConv2d, LoRALinear
from app.models.restorer import PrecomputedConditioning, ToyRestorer

__all__ = [
    "AlignmentOutput",
    "Codebook",
    "LatentAlignmentAdapter",
    "ToyCodec",
    "EmbeddingProvider",
    "IdentityEmbedding",
    "LossProviders",
    "PerceptualDistance",
    "PixelEmbedding",
    "RandomConvFeatures",
    "StructureEmbedding",
    "LoRAConv2d",
    "LoRALinear",
    "PrecomputedConditioning",
    "ToyRestorer",
]
