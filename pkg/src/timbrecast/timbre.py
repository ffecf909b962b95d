"""Multi-scale speaker timbre: frame-level fine embeddings from a conv
speaker encoder, and a coarse global vector from a transformer with mean
pooling (no positional encoding, so the coarse vector is order-free)."""

from __future__ import annotations

import torch
import torch.nn as nn

from .nets import ConvEncoder


class TimbreError(ValueError):
    pass


class TimbreEncoder(nn.Module):
    def __init__(self, channels: list[int], timbre_dim: int,
                 n_layers: int = 2, n_heads: int = 4):
        super().__init__()
        self.encoder = ConvEncoder(channels, timbre_dim)
        layer = nn.TransformerEncoderLayer(
            d_model=timbre_dim, nhead=n_heads, dim_feedforward=2 * timbre_dim,
            batch_first=True, dropout=0.0, activation="gelu")
        self.pool_transformer = nn.TransformerEncoder(layer, num_layers=n_layers)

    def speaker_encode(self, ref: torch.Tensor) -> torch.Tensor:
        """(B, L) reference waveform -> (B, L/256, D) fine-grained timbre frames."""
        return self.encoder(ref.unsqueeze(1)).transpose(1, 2)

    def pool_coarse(self, fine: torch.Tensor) -> torch.Tensor:
        """(B, F, D) fine frames -> (B, D) coarse vector (attention + mean pool)."""
        if fine.shape[1] < 1:
            raise TimbreError("need at least one reference frame")
        return self.pool_transformer(fine).mean(dim=1)

    def forward(self, ref: torch.Tensor):
        """Both timbre scales from one reference clip: (fine, coarse)."""
        fine = self.speaker_encode(ref)
        return fine, self.pool_coarse(fine)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> float:
    a = a.reshape(-1).double()
    b = b.reshape(-1).double()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise TimbreError("cosine similarity undefined for zero vectors")
    return float((a @ b) / (na * nb))
