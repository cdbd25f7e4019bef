"""
One-step latent restorer.

A small UNet-like denoiser conditioned on a fixed prompt (cross-attention
over token embeddings) and a single learned timestep vector. Its layer set
is six convolutions (conv_in, conv_1a, conv_1b, conv_2a, conv_2b, conv_out)
and two attention projections (attn_self.qkv, attn_cross.kv), plus the text
and timestep modules that pruning replaces with precomputed tensors.
"""
import math
import re
import zlib
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from app.utils.checksum import array_checksum
from app.utils.errors import ContainerError, ShapeMismatchError

DEFAULT_PROMPT = "face, high quality"

_TOKEN_PATTERN = re.compile(r"[a-z0-9]+")


def tokenize(prompt: str, vocab_size: int) -> torch.Tensor:
    """Lower-cased word tokens hashed into the vocabulary (crc32 is stable across runs)"""
    words = _TOKEN_PATTERN.findall(prompt.lower()) or ["<empty>"]
    return torch.tensor([zlib.crc32(word.encode("utf-8")) % vocab_size for word in words], dtype=torch.int64)


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int = 512, context_dim: int = 32):
        super().__init__()
        self.vocab_size = vocab_size
        self.embedding = nn.Embedding(vocab_size, context_dim)
        self.proj = nn.Linear(context_dim, context_dim)

    def forward(self, prompt: str) -> torch.Tensor:
        """T×context_dim token embeddings"""
        tokens = tokenize(prompt, self.vocab_size).to(self.embedding.weight.device)
        return self.proj(self.embedding(tokens))


class TimestepEmbedding(nn.Module):
    """Single-step model: one learned timestep vector through an MLP"""

    def __init__(self, dim: int):
        super().__init__()
        self.step = nn.Parameter(torch.randn(dim) * 0.02)
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self) -> torch.Tensor:
        return self.mlp(self.step)


class SelfAttention(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.qkv = nn.Linear(channels, 3 * channels)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        n, c, height, width = h.shape
        x = h.flatten(2).transpose(1, 2)
        q, k, v = self.qkv(x).chunk(3, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        return (attn @ v).transpose(1, 2).reshape(n, c, height, width)


class CrossAttention(nn.Module):
    """Feature positions attend over prompt tokens; queries are the features themselves"""

    def __init__(self, channels: int, context_dim: int):
        super().__init__()
        self.kv = nn.Linear(context_dim, 2 * channels)

    def forward(self, h: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        n, c, height, width = h.shape
        q = h.flatten(2).transpose(1, 2)
        k, v = self.kv(context).chunk(2, dim=-1)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(c), dim=-1)
        return (attn @ v).transpose(1, 2).reshape(n, c, height, width)


@dataclass(frozen=True)
class PrecomputedConditioning:
    """Prompt and timestep embeddings computed once, stored read-only"""
    prompt_text: str
    prompt_embedding: np.ndarray
    timestep_embedding: np.ndarray
    checksum: int

    @staticmethod
    def compute_checksum(prompt_text: str, prompt_embedding: np.ndarray, timestep_embedding: np.ndarray) -> int:
        return array_checksum(prompt_embedding, timestep_embedding, text=prompt_text)

    @classmethod
    def create(cls, prompt_text: str, prompt_embedding: np.ndarray, timestep_embedding: np.ndarray) -> "PrecomputedConditioning":
        prompt_embedding = np.array(prompt_embedding, dtype=np.float32)
        timestep_embedding = np.array(timestep_embedding, dtype=np.float32)
        prompt_embedding.setflags(write=False)
        timestep_embedding.setflags(write=False)
        checksum = cls.compute_checksum(prompt_text, prompt_embedding, timestep_embedding)
        return cls(prompt_text, prompt_embedding, timestep_embedding, checksum)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "prompt_text": np.frombuffer(self.prompt_text.encode("utf-8"), dtype=np.uint8),
            "prompt_embedding": self.prompt_embedding,
            "timestep_embedding": self.timestep_embedding,
            "checksum": np.array([self.checksum], dtype=np.uint64).view(np.int64),
        }

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "PrecomputedConditioning":
        """Rebuild from container arrays; the stored checksum must match"""
        missing = {"prompt_text", "prompt_embedding", "timestep_embedding", "checksum"} - set(arrays)
        if missing:
            raise ContainerError(f"Conditioning file is missing {sorted(missing)}")
        prompt_text = np.asarray(arrays["prompt_text"], dtype=np.uint8).tobytes().decode("utf-8")
        stored = int(np.asarray(arrays["checksum"], dtype=np.int64).view(np.uint64)[0])
        conditioning = cls.create(prompt_text, arrays["prompt_embedding"], arrays["timestep_embedding"])
        if conditioning.checksum != stored:
            raise ContainerError("Conditioning checksum mismatch: tensors were modified or corrupted")
        return conditioning


class ToyRestorer(nn.Module):
    def __init__(
        self,
        latent_channels: int = 4,
        hidden_channels: int = 64,
        context_dim: int = 32,
        vocab_size: int = 512,
        prompt: str = DEFAULT_PROMPT,
    ):
        super().__init__()
        self.latent_channels = latent_channels
        self.prompt = prompt
        self.text_encoder: Optional[TextEncoder] = TextEncoder(vocab_size, context_dim)
        self.time_embedding: Optional[TimestepEmbedding] = TimestepEmbedding(hidden_channels)

        self.conv_in = nn.Conv2d(latent_channels, hidden_channels, 3, padding=1)
        self.conv_1a = nn.Conv2d(hidden_channels, hidden_channels, 3, padding=1)
        self.conv_1b = nn.Conv2d(hidden_channels, hidden_channels, 3, padding=1)
        self.conv_2a = nn.Conv2d(hidden_channels, hidden_channels, 3, stride=2, padding=1)
        self.attn_self = SelfAttention(hidden_channels)
        self.attn_cross = CrossAttention(hidden_channels, context_dim)
        self.conv_2b = nn.Conv2d(hidden_channels, hidden_channels, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden_channels, latent_channels, 3, padding=1)
        # Starts as the identity map z → z
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    @property
    def pruned(self) -> bool:
        return self.text_encoder is None

    def live_conditioning(self):
        """(prompt tokens T×ctx, timestep vector) from the live embedding modules"""
        if self.pruned:
            raise RuntimeError("Embedding modules were pruned; use the precomputed tensors")
        return self.text_encoder(self.prompt), self.time_embedding()

    def precompute(self) -> PrecomputedConditioning:
        with torch.no_grad():
            context, temb = self.live_conditioning()
        return PrecomputedConditioning.create(self.prompt, context.cpu().numpy(), temb.cpu().numpy())

    def prune(self, conditioning: PrecomputedConditioning) -> None:
        """Drop the text/timestep modules, serving their outputs from fixed tensors"""
        device = self.conv_in.weight.device
        self.register_buffer("prompt_embedding", torch.from_numpy(np.array(conditioning.prompt_embedding)).to(device), persistent=False)
        self.register_buffer("timestep_embedding", torch.from_numpy(np.array(conditioning.timestep_embedding)).to(device), persistent=False)
        self.prompt = conditioning.prompt_text
        self.text_encoder = None
        self.time_embedding = None

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeMismatchError(f"Expected N×{self.latent_channels}×h×w latents, got {tuple(z.shape)}")
        if self.pruned:
            context, temb = self.prompt_embedding, self.timestep_embedding
        else:
            context, temb = self.live_conditioning()
        context = context.unsqueeze(0).expand(z.shape[0], -1, -1)

        h = F.silu(self.conv_in(z)) + temb[None, :, None, None]
        h1 = h + self.conv_1b(F.silu(self.conv_1a(h)))
        m = F.silu(self.conv_2a(h1))
        m = m + self.attn_self(m)
        m = m + self.attn_cross(m, context)
        m = F.silu(self.conv_2b(m))
        u = F.interpolate(m, size=h1.shape[-2:], mode="nearest") + h1
        return z + self.conv_out(F.silu(u))
