"""Content conditioning path: token embedding, Mix-Style layer normalization,
residual pre-encoder, and 256x upsampling to audio rate.

This path never sees the reference waveform; timbre enters the model only
through the timbre module.
"""

from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn

logger = logging.getLogger(__name__)

HOP = 256


class ContentError(ValueError):
    pass


class MixStyleLayerNorm(nn.Module):
    """Instance-statistics normalization with training-time statistics mixing.

    At eval (or when mixing does not fire) the re-scaling uses the instance's
    own statistics, so the layer is the identity on the statistics path.
    When mixing fires, the per-instance mean/std are convexly combined with a
    batch-shuffled partner's, lambda ~ Beta(alpha, alpha).
    """

    def __init__(self, alpha: float = 0.1, prob: float = 0.5, enabled: bool = True,
                 eps: float = 1e-6):
        super().__init__()
        self.alpha = alpha
        self.prob = prob
        self.enabled = enabled
        self.eps = eps

    def forward(self, x: torch.Tensor, training: bool = False,
                rng: np.random.Generator | None = None,
                lam: torch.Tensor | None = None,
                perm: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, F, C); statistics are per-instance, per-channel over time."""
        b = x.shape[0]
        mu = x.mean(dim=1, keepdim=True)
        sig = (x.var(dim=1, keepdim=True, unbiased=False) + self.eps).sqrt()
        x_norm = (x - mu) / sig

        mix = training and self.enabled
        forced = lam is not None or perm is not None
        if mix and not forced:
            if rng is None:
                rng = np.random.default_rng()
            mix = rng.random() < self.prob
        if mix and b < 2:
            logger.warning("MSLN mixing skipped: batch size 1")
            mix = False
        if not mix and not forced:
            return x_norm * sig + mu

        if lam is None:
            lam = torch.as_tensor(rng.beta(self.alpha, self.alpha, size=(b, 1, 1)),
                                  dtype=x.dtype, device=x.device)
        else:
            lam = torch.as_tensor(lam, dtype=x.dtype, device=x.device).reshape(-1, 1, 1)
        if perm is None:
            perm = torch.as_tensor(rng.permutation(b), device=x.device)
        mu2, sig2 = mu[perm].detach(), sig[perm].detach()
        mu_mix = lam * mu + (1 - lam) * mu2
        sig_mix = lam * sig + (1 - lam) * sig2
        return x_norm * sig_mix + mu_mix


class _ResBlock(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv1d(dim, dim, kernel_size=3, padding=1)
        self.conv2 = nn.Conv1d(dim, dim, kernel_size=3, padding=1)

    def forward(self, x):  # (B, C, F)
        h = self.conv2(torch.nn.functional.gelu(self.conv1(x)))
        return x + h


class ContentEncoder(nn.Module):
    """Token embedding -> residual conv pre-encoder with MSLN after each block."""

    def __init__(self, codebook_size: int, content_dim: int, n_blocks: int = 2,
                 msln_alpha: float = 0.1, msln_prob: float = 0.5, msln_enabled: bool = True):
        super().__init__()
        self.codebook_size = codebook_size
        self.embedding = nn.Embedding(codebook_size, content_dim)
        self.blocks = nn.ModuleList(_ResBlock(content_dim) for _ in range(n_blocks))
        self.msln = MixStyleLayerNorm(msln_alpha, msln_prob, msln_enabled)

    def embed_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, F) integer tokens -> (B, F, C) embedding rows."""
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.codebook_size):
            raise ContentError(f"token out of range [0, {self.codebook_size})")
        return self.embedding(tokens)

    def forward(self, tokens: torch.Tensor, training: bool = False,
                rng: np.random.Generator | None = None) -> torch.Tensor:
        """(B, F) tokens -> (B, F, C) pre-encoded content frames."""
        x = self.embed_tokens(tokens)
        for block in self.blocks:
            x = block(x.transpose(1, 2)).transpose(1, 2)
            x = self.msln(x, training=training, rng=rng)
        return x


def upsample_to_audio(frames: torch.Tensor, hop: int = HOP) -> torch.Tensor:
    """(B, F, C) -> (B, F * hop, C) by nearest-frame repetition."""
    return frames.repeat_interleave(hop, dim=1)
