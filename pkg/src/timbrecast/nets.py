"""Shared network building blocks: 256x strided conv encoder/decoder and
sinusoidal timestep embeddings."""

from __future__ import annotations

import math

import torch
import torch.nn as nn

STRIDES = (4, 4, 4, 4)  # product 256 == hop


class ConvEncoder(nn.Module):
    """Strided conv stack with exactly 256x temporal compression.

    Input (B, 1, L) with L % 256 == 0; output (B, out_dim, L // 256).
    """

    def __init__(self, channels: list[int], out_dim: int):
        super().__init__()
        assert len(channels) == len(STRIDES)
        layers = [nn.Conv1d(1, channels[0], kernel_size=7, padding=3)]
        prev = channels[0]
        for ch, s in zip(channels, STRIDES):
            layers += [nn.GELU(), nn.Conv1d(prev, ch, kernel_size=2 * s, stride=s, padding=s // 2)]
            prev = ch
        layers += [nn.GELU(), nn.Conv1d(prev, out_dim, kernel_size=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 256:
            raise ValueError(f"input length {x.shape[-1]} not a multiple of 256")
        return self.net(x)


class ConvDecoder(nn.Module):
    """Transposed-conv mirror of ConvEncoder: (B, in_dim, F) -> (B, 1, F * 256)."""

    def __init__(self, channels: list[int], in_dim: int):
        super().__init__()
        rev = list(reversed(channels))
        layers = [nn.Conv1d(in_dim, rev[0], kernel_size=1)]
        prev = rev[0]
        for ch, s in zip(rev, reversed(STRIDES)):
            layers += [nn.GELU(),
                       nn.ConvTranspose1d(prev, ch, kernel_size=2 * s, stride=s, padding=s // 2)]
            prev = ch
        layers += [nn.GELU(), nn.Conv1d(prev, 1, kernel_size=7, padding=3), nn.Tanh()]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps; (B,) -> (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype, device=t.device) / half)
    args = t[:, None].to(freqs) * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb
