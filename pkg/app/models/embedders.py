"""
Fixed embedding networks behind the perceptual, identity and structure terms.

All networks are frozen at construction and seeded, so every loss and
metric that uses them is a deterministic function of its inputs. Any
module returning unit-norm N×n embeddings can replace them.
"""
import math
from typing import List, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.utils.seeding import torch_generator
from app.utils.tensors import image_to_tensor, images_to_tensor

FEATURE_CHANNELS = (16, 32, 64)
ORIENTATION_BINS = 8
ORIENTATION_CONCENTRATION = 2.0
STRUCTURE_GRID = 4
_EPS = 1e-6


def _as_rgb(x: torch.Tensor) -> torch.Tensor:
    return x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x


class RandomConvFeatures(nn.Module):
    """Stride-2 conv stack with seeded He-normal weights, never trained"""

    def __init__(self, seed: int = 1234, channels: Sequence[int] = FEATURE_CHANNELS):
        super().__init__()
        generator = torch_generator(seed, "feature_network")
        layers = []
        in_channels = 3
        for out_channels in channels:
            conv = nn.Conv2d(in_channels, out_channels, 3, stride=2, padding=1)
            fan_in = in_channels * 9
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in))
                # Non-zero biases keep embeddings of blank images away from the origin
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=generator) * 0.1)
            layers.append(conv)
            in_channels = out_channels
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = _as_rgb(x)
        features = []
        for conv in self.layers:
            h = F.silu(conv(h))
            features.append(h)
        return features


class PerceptualDistance(nn.Module):
    """Σ over layers of spatial-mean, channel-summed squared differences of channel-normalized features"""

    def __init__(self, features: RandomConvFeatures):
        super().__init__()
        self.features = features

    @staticmethod
    def _normalize(f: torch.Tensor) -> torch.Tensor:
        return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + _EPS)

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Per-sample distances, shape N"""
        total = a.new_zeros(a.shape[0])
        for fa, fb in zip(self.features(a), self.features(b)):
            diff = (self._normalize(fa) - self._normalize(fb)).pow(2).sum(dim=1)
            total = total + diff.mean(dim=(1, 2))
        return total


class EmbeddingProvider(nn.Module):
    """Image batch → unit-norm N×dim embeddings"""
    name = "base"
    dim = 0

    def embed(self, img: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self(image_to_tensor(img))[0].double().numpy()

    def embed_batch(self, images: Sequence[np.ndarray]) -> np.ndarray:
        with torch.no_grad():
            return self(images_to_tensor(images)).double().numpy()


class IdentityEmbedding(EmbeddingProvider):
    """Global-average-pooled deepest features"""
    name = "identity"

    def __init__(self, features: RandomConvFeatures):
        super().__init__()
        self.features = features
        self.dim = features.layers[-1].out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        deepest = self.features(x)[-1]
        return F.normalize(deepest.mean(dim=(2, 3)), dim=1)


class StructureEmbedding(EmbeddingProvider):
    """
    Edge-orientation histogram over a coarse grid.

    Sobel gradients give magnitude m and orientation θ; each pixel votes
    m·exp(κ(cos(2θ − φ_b) − 1)) into B soft bins (the doubled angle makes
    θ and θ+π the same edge), pooled over a G×G grid.
    """
    name = "structure"

    def __init__(self, bins: int = ORIENTATION_BINS, grid: int = STRUCTURE_GRID, concentration: float = ORIENTATION_CONCENTRATION):
        super().__init__()
        self.bins = bins
        self.grid = grid
        self.concentration = concentration
        self.dim = bins * grid * grid
        sobel_x = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
        self.register_buffer("sobel", torch.stack([sobel_x, sobel_x.t()])[:, None], persistent=False)
        phases = 2 * math.pi * torch.arange(bins, dtype=torch.float64) / bins
        self.register_buffer("bin_cos", phases.cos().float(), persistent=False)
        self.register_buffer("bin_sin", phases.sin().float(), persistent=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gray = x.mean(dim=1, keepdim=True)
        grads = F.conv2d(F.pad(gray, (1, 1, 1, 1), mode="replicate"), self.sobel.to(x.dtype))
        gx, gy = grads[:, 0:1], grads[:, 1:2]
        sq = gx * gx + gy * gy + _EPS
        magnitude = sq.sqrt()
        cos2 = (gx * gx - gy * gy) / sq
        sin2 = 2 * gx * gy / sq
        bin_cos = self.bin_cos.to(x.dtype)[None, :, None, None]
        bin_sin = self.bin_sin.to(x.dtype)[None, :, None, None]
        votes = magnitude * torch.exp(self.concentration * (cos2 * bin_cos + sin2 * bin_sin - 1.0))
        pooled = F.adaptive_avg_pool2d(votes, self.grid)
        return F.normalize(pooled.flatten(1), dim=1)


class PixelEmbedding(EmbeddingProvider):
    """Flattened pixels, unit-normalized; used for corpus compactness diagnostics"""
    name = "pixel"

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.normalize(x.flatten(1), dim=1)


class LossProviders(nn.Module):
    """The three fixed networks used by the restoration objective and the metrics"""

    def __init__(self, seed: int = 1234):
        super().__init__()
        features = RandomConvFeatures(seed)
        self.perceptual = PerceptualDistance(features)
        self.identity = IdentityEmbedding(features)
        self.structure = StructureEmbedding()
        self.requires_grad_(False)
