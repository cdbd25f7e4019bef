"""
Latent alignment adapter.

    f       = extractor(z_LQ)                  shallow conv, stride 1
    c*      = argmin_i ‖f(p) − c_i‖₂           per spatial position p
    z_align = mapping(c*)                      back to the latent space

The quantized map is returned as `q + (f − sg(f))`: its value is exactly
the selected codebook rows, the feature gradient is copied straight
through, and the selected rows receive the downstream gradient.
"""
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from app.utils.errors import EmptyCodebookError, ShapeMismatchError

# Elements per distance chunk (rows × K × d)
_DISTANCE_CHUNK_ELEMENTS = 1 << 22


class Codebook(nn.Module):
    """K×d dictionary of anchor vectors with a usage counter"""

    def __init__(self, size: int, dim: int):
        super().__init__()
        if size < 1:
            raise EmptyCodebookError("Codebook needs at least one entry")
        if dim < 1:
            raise ValueError(f"Codebook entry dimension must be >= 1, got {dim}")
        self.weight = nn.Parameter(torch.randn(size, dim) / math.sqrt(dim))
        self.register_buffer("usage_counts", torch.zeros(size, dtype=torch.int64))

    @property
    def size(self) -> int:
        return self.weight.shape[0]

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def reset_usage(self) -> None:
        self.usage_counts.zero_()

    @torch.no_grad()
    def nearest(self, flat: torch.Tensor, record: bool = True) -> torch.Tensor:
        """
        Index of the nearest entry for every row of an M×d matrix.

        Distances are Σ(f − c)² in float64; argmin keeps the first minimum,
        so ties go to the lowest index.
        """
        if flat.ndim != 2 or flat.shape[1] != self.dim:
            raise ShapeMismatchError(f"Expected M×{self.dim} features, got {tuple(flat.shape)}")
        if not torch.isfinite(flat).all():
            raise ValueError("Features must be finite")
        entries = self.weight.detach().double()
        rows = max(1, _DISTANCE_CHUNK_ELEMENTS // (self.size * self.dim))
        indices = [
            ((chunk.double()[:, None, :] - entries[None, :, :]) ** 2).sum(dim=-1).argmin(dim=1)
            for chunk in flat.detach().split(rows)
        ]
        result = torch.cat(indices) if indices else torch.zeros(0, dtype=torch.int64)
        if record and result.numel():
            self.usage_counts += torch.bincount(result, minlength=self.size)
        return result

    def quantize(self, features: torch.Tensor, record: bool = True):
        """Per-position nearest-entry quantization → (quantized map, N×h×w index map)"""
        if features.ndim != 4 or features.shape[1] != self.dim:
            raise ShapeMismatchError(f"Expected N×{self.dim}×h×w features, got {tuple(features.shape)}")
        n, d, h, w = features.shape
        flat = features.permute(0, 2, 3, 1).reshape(-1, d)
        indices = self.nearest(flat, record=record)
        selected = F.embedding(indices, self.weight)
        selected = selected.reshape(n, h, w, d).permute(0, 3, 1, 2)
        quantized = selected + (features - features.detach())
        return quantized, indices.reshape(n, h, w)


@dataclass
class AlignmentOutput:
    aligned: torch.Tensor
    features: torch.Tensor
    quantized: torch.Tensor
    indices: torch.Tensor


class LatentAlignmentAdapter(nn.Module):
    def __init__(self, latent_channels: int = 4, codebook_size: int = 256, code_dim: int = 64, hidden_channels: int = 64):
        super().__init__()
        self.latent_channels = latent_channels
        self.extractor = nn.Sequential(
            nn.Conv2d(latent_channels, hidden_channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden_channels, code_dim, 3, padding=1),
        )
        self.codebook = Codebook(codebook_size, code_dim)
        self.mapping = nn.Sequential(
            nn.Conv2d(code_dim, hidden_channels, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(hidden_channels, latent_channels, 3, padding=1),
        )
        # Small-variance head: starts near zero without being identically zero
        nn.init.normal_(self.mapping[-1].weight, std=1e-3)
        nn.init.zeros_(self.mapping[-1].bias)

    @property
    def code_dim(self) -> int:
        return self.codebook.dim

    def extract_features(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeMismatchError(f"Expected N×{self.latent_channels}×h×w latents, got {tuple(z.shape)}")
        return self.extractor(z)

    def quantize(self, features: torch.Tensor, record: bool = True):
        return self.codebook.quantize(features, record=record)

    def map_to_latent(self, quantized: torch.Tensor) -> torch.Tensor:
        if quantized.ndim != 4 or quantized.shape[1] != self.code_dim:
            raise ShapeMismatchError(f"Expected N×{self.code_dim}×h×w codes, got {tuple(quantized.shape)}")
        return self.mapping(quantized)

    def forward(self, z: torch.Tensor, record: bool = True) -> AlignmentOutput:
        features = self.extract_features(z)
        quantized, indices = self.quantize(features, record=record)
        return AlignmentOutput(self.map_to_latent(quantized), features, quantized, indices)
