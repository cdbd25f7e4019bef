"""
Toy latent codec - deterministic conv autoencoder that defines the latent space.

Encoder: conv → one stride-2 conv per extra width → conv to C_z.
Decoder mirrors it with transposed convs; output is clamped to [0, 1].
"""
from typing import Sequence

import torch
import torch.nn as nn

from app.utils.errors import ShapeMismatchError


class ToyCodec(nn.Module):
    def __init__(self, in_channels: int = 3, latent_channels: int = 4, hidden_widths: Sequence[int] = (32, 64, 64)):
        super().__init__()
        widths = list(hidden_widths)
        if len(widths) < 2:
            raise ValueError("hidden_widths needs at least two entries")
        self.in_channels = in_channels
        self.latent_channels = latent_channels
        self.hidden_widths = widths

        encoder = [nn.Conv2d(in_channels, widths[0], 3, padding=1), nn.SiLU()]
        for prev, width in zip(widths[:-1], widths[1:]):
            encoder += [nn.Conv2d(prev, width, 4, stride=2, padding=1), nn.SiLU()]
        encoder.append(nn.Conv2d(widths[-1], latent_channels, 3, padding=1))
        self.encoder = nn.Sequential(*encoder)

        decoder = [nn.Conv2d(latent_channels, widths[-1], 3, padding=1), nn.SiLU()]
        for width, prev in zip(widths[:0:-1], widths[-2::-1]):
            decoder += [nn.ConvTranspose2d(width, prev, 4, stride=2, padding=1), nn.SiLU()]
        decoder.append(nn.Conv2d(widths[0], in_channels, 3, padding=1))
        self.decoder = nn.Sequential(*decoder)

    @property
    def stride(self) -> int:
        return 2 ** (len(self.hidden_widths) - 1)

    def latent_shape(self, height: int, width: int) -> tuple:
        return (self.latent_channels, height // self.stride, width // self.stride)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """N×C×H×W images → N×C_z×(H/stride)×(W/stride) latents"""
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(f"Expected N×{self.in_channels}×H×W images, got {tuple(x.shape)}")
        if x.shape[2] % self.stride or x.shape[3] % self.stride:
            raise ShapeMismatchError(
                f"Image size {tuple(x.shape[2:])} is not divisible by the codec stride {self.stride}"
            )
        return self.encoder(x)

    def decode_raw(self, z: torch.Tensor) -> torch.Tensor:
        if z.ndim != 4 or z.shape[1] != self.latent_channels:
            raise ShapeMismatchError(f"Expected N×{self.latent_channels}×h×w latents, got {tuple(z.shape)}")
        return self.decoder(z)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Latents → images clamped to [0, 1]"""
        return self.decode_raw(z).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(self.encode(x))
