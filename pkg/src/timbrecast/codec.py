"""Single-codebook speech codec with a reference encoder.

The encoder compresses audio 256x in time; a global reference embedding is
subtracted from the encoder output before quantization so the discrete
tokens shed global (timbre-like) information. The decoder adds the
reference embedding back and reconstructs the waveform. The quantizer is a
straight-through VQ with EMA codebook updates and dead-code reseeding.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import ConvDecoder, ConvEncoder


class CodecError(ValueError):
    pass


def quantize_nearest(latent: torch.Tensor, codebook: torch.Tensor):
    """Nearest-codebook-entry quantization with straight-through gradients.

    latent: (..., F, D); codebook: (K, D). Returns (tokens, quantized) where
    tokens[f] is the lowest-index argmin of squared Euclidean distance and
    quantized carries latent's gradient unchanged.
    """
    if codebook.numel() == 0:
        raise CodecError("empty codebook")
    if latent.shape[-1] != codebook.shape[-1]:
        raise CodecError(f"dim mismatch: latent {latent.shape[-1]} vs codebook {codebook.shape[-1]}")
    # exact pairwise squared distances; argmin returns the first (lowest) index on ties
    diff = latent.unsqueeze(-2) - codebook  # (..., F, K, D)
    dist = diff.pow(2).sum(-1)
    tokens = dist.argmin(-1)
    hard = codebook[tokens]
    quantized = latent + (hard - latent).detach()
    return tokens, quantized


class EmaQuantizer(nn.Module):
    """EMA-updated single codebook (no codebook gradients)."""

    def __init__(self, codebook_size: int, code_dim: int, decay: float = 0.99,
                 dead_code_steps: int = 200, eps: float = 1e-5):
        super().__init__()
        self.decay = decay
        self.dead_code_steps = dead_code_steps
        self.eps = eps
        self.register_buffer("codebook", torch.randn(codebook_size, code_dim) * 0.1)
        self.register_buffer("cluster_size", torch.zeros(codebook_size))
        self.register_buffer("embed_avg", self.codebook.clone())
        self.register_buffer("steps_unused", torch.zeros(codebook_size, dtype=torch.long))
        self.register_buffer("initialized", torch.zeros((), dtype=torch.bool))

    @torch.no_grad()
    def _init_from(self, flat: torch.Tensor, g: torch.Generator | None):
        k = self.codebook.shape[0]
        idx = torch.randint(0, flat.shape[0], (k,), generator=g)
        noise = 0.01 * torch.randn(self.codebook.shape, generator=g)
        self.codebook.copy_(flat[idx] + noise)
        self.embed_avg.copy_(self.codebook)
        self.cluster_size.fill_(1.0)
        self.initialized.fill_(True)

    def forward(self, latent: torch.Tensor, update: bool = False,
                g: torch.Generator | None = None):
        """latent: (B, F, D) or (F, D). Returns (tokens, quantized)."""
        flat = latent.reshape(-1, latent.shape[-1])
        if update and not bool(self.initialized):
            self._init_from(flat.detach(), g)
        tokens, quantized = quantize_nearest(latent, self.codebook)
        if update:
            self._ema_update(flat.detach(), tokens.reshape(-1), g)
        return tokens, quantized

    @torch.no_grad()
    def _ema_update(self, flat: torch.Tensor, tokens: torch.Tensor,
                    g: torch.Generator | None):
        k = self.codebook.shape[0]
        onehot = F.one_hot(tokens, k).to(flat.dtype)
        counts = onehot.sum(0)
        self.cluster_size.mul_(self.decay).add_(counts, alpha=1 - self.decay)
        self.embed_avg.mul_(self.decay).add_(onehot.t() @ flat, alpha=1 - self.decay)
        norm = self.cluster_size + self.eps
        self.codebook.copy_(self.embed_avg / norm.unsqueeze(1))
        used = counts > 0
        self.steps_unused[used] = 0
        self.steps_unused[~used] += 1
        dead = self.steps_unused >= self.dead_code_steps
        if dead.any():
            idx = torch.randint(0, flat.shape[0], (int(dead.sum()),), generator=g)
            self.codebook[dead] = flat[idx]
            self.embed_avg[dead] = flat[idx]
            self.cluster_size[dead] = 1.0
            self.steps_unused[dead] = 0


def subtract_reference(latent: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """latent (..., F, D) minus a broadcast global embedding (..., D)."""
    if latent.shape[-1] != ref.shape[-1]:
        raise CodecError(f"dim mismatch: latent {latent.shape[-1]} vs ref {ref.shape[-1]}")
    return latent - ref.unsqueeze(-2)


class SpeechCodec(nn.Module):
    """Encoder + reference encoder + EMA-VQ + decoder."""

    def __init__(self, channels: list[int], code_dim: int, codebook_size: int,
                 commitment_weight: float = 0.25, ema_decay: float = 0.99,
                 dead_code_steps: int = 200):
        super().__init__()
        self.commitment_weight = commitment_weight
        self.encoder = ConvEncoder(channels, code_dim)
        self.ref_encoder = ConvEncoder(channels, code_dim)
        self.quantizer = EmaQuantizer(codebook_size, code_dim, ema_decay, dead_code_steps)
        self.decoder = ConvDecoder(channels, code_dim)

    def encode(self, wav: torch.Tensor) -> torch.Tensor:
        """(B, L) waveform -> (B, F, D) latent frames, F = L / 256."""
        return self.encoder(wav.unsqueeze(1)).transpose(1, 2)

    def reference_embed(self, clip: torch.Tensor) -> torch.Tensor:
        """(B, L) clip -> (B, D) time-pooled global embedding."""
        return self.ref_encoder(clip.unsqueeze(1)).mean(dim=2)

    def decode(self, quantized: torch.Tensor, ref: torch.Tensor | None = None) -> torch.Tensor:
        """(B, F, D) frames (+ optional global embedding added back) -> (B, F*256)."""
        z = quantized if ref is None else quantized + ref.unsqueeze(1)
        return self.decoder(z.transpose(1, 2)).squeeze(1)

    def tokenize(self, wav: torch.Tensor) -> torch.Tensor:
        """Content tokens of a waveform, using its own reference embedding."""
        latent = self.encode(wav)
        ref = self.reference_embed(wav)
        tokens, _ = self.quantizer(subtract_reference(latent, ref))
        return tokens

    def reconstruct(self, wav: torch.Tensor) -> torch.Tensor:
        latent = self.encode(wav)
        ref = self.reference_embed(wav)
        _, q = self.quantizer(subtract_reference(latent, ref))
        return self.decode(q, ref)

    def training_step(self, wav: torch.Tensor, ref_clip: torch.Tensor,
                      g: torch.Generator | None = None):
        """One forward pass; returns (total_loss, metrics dict).

        ref_clip must come from the same utterance/speaker as wav so the
        reference path can only carry global information.
        """
        latent = self.encode(wav)
        ref = self.reference_embed(ref_clip)
        content = subtract_reference(latent, ref)
        tokens, q = self.quantizer(content, update=self.training, g=g)
        recon = self.decode(q, ref)
        recon_loss = F.mse_loss(recon, wav)
        codebook_loss = F.mse_loss(q.detach(), content.detach())  # value only (EMA updates)
        commit_loss = F.mse_loss(content, q.detach())
        loss = recon_loss + codebook_loss + self.commitment_weight * commit_loss
        if not torch.isfinite(loss):
            raise CodecError(f"non-finite codec loss: recon={recon_loss.item()} "
                             f"commit={commit_loss.item()}")
        metrics = {
            "loss": loss.item(),
            "recon": recon_loss.item(),
            "codebook": codebook_loss.item(),
            "commit": commit_loss.item(),
            "tokens_used": int(tokens.unique().numel()),
        }
        return loss, metrics


def dump_tokens(utterance_ids: list[str], token_seqs: list[torch.Tensor]) -> str:
    """One utterance per line: `utterance_id<TAB>space-separated integers`."""
    lines = []
    for uid, toks in zip(utterance_ids, token_seqs):
        lines.append(uid + "\t" + " ".join(str(int(t)) for t in toks.reshape(-1)))
    return "\n".join(lines) + "\n"
