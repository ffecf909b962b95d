"""Conversion model bundle: frozen codec + content encoder + timbre encoder +
denoiser + schedule, with the end-to-end convert path."""

from __future__ import annotations

import numpy as np
import torch

from . import content as content_mod
from .codec import SpeechCodec
from .config import RunConfig
from .content import ContentEncoder
from .diffusion import Conditions, NoiseSchedule, UNetConfig, UNetDenoiser, make_linear_schedule
from .sampler import GuidanceSchedule, fast_sample
from .timbre import TimbreEncoder


def build_codec(cfg: RunConfig) -> SpeechCodec:
    return SpeechCodec(cfg.channels(), cfg.code_dim, cfg.codebook_size,
                       cfg.commitment_weight, cfg.ema_decay, cfg.dead_code_steps)


class VCModel(torch.nn.Module):
    """Everything needed to convert: tokens -> content condition, reference ->
    multi-scale timbre, denoiser + schedule."""

    def __init__(self, cfg: RunConfig, codec: SpeechCodec):
        super().__init__()
        self.cfg = cfg
        self.codec = codec
        for p in self.codec.parameters():
            p.requires_grad_(False)
        self.content_encoder = ContentEncoder(
            cfg.codebook_size, cfg.content_dim,
            msln_alpha=cfg.msln_alpha, msln_prob=cfg.msln_prob,
            msln_enabled=cfg.msln_enabled)
        self.timbre_encoder = TimbreEncoder(cfg.channels(), cfg.timbre_dim,
                                            cfg.timbre_layers, cfg.timbre_heads)
        self.denoiser = UNetDenoiser(UNetConfig(
            n_blocks=cfg.n_blocks, base_dim=cfg.base_dim,
            cross_attn_every=cfg.cross_attn_every, query_downsample=cfg.query_downsample,
            content_dim=cfg.content_dim, timbre_dim=cfg.timbre_dim,
            dilation_cycle=cfg.dilation_cycle))
        self.schedule: NoiseSchedule = make_linear_schedule(
            cfg.beta_min, cfg.beta_max, cfg.diffusion_steps)

    def trainable_parameters(self):
        for module in (self.content_encoder, self.timbre_encoder, self.denoiser):
            yield from module.parameters()

    def content_condition(self, wav: torch.Tensor, training: bool = False,
                          rng: np.random.Generator | None = None) -> torch.Tensor:
        """(B, L) waveform -> (B, L, C) upsampled content condition (via frozen codec)."""
        with torch.no_grad():
            tokens = self.codec.tokenize(wav)
        frames = self.content_encoder(tokens, training=training, rng=rng)
        return content_mod.upsample_to_audio(frames, self.cfg.hop)

    def timbre_condition(self, ref: torch.Tensor):
        """(B, Lr) reference -> (fine (B, F, D), coarse (B, D)); the fine scale is
        replaced by the learned null frame under the coarse-only ablation."""
        fine, coarse = self.timbre_encoder(ref)
        if self.cfg.coarse_only:
            b = ref.shape[0]
            fine = self.denoiser.null_fine.view(1, 1, -1).expand(b, 1, -1)
        return fine, coarse

    def conditions(self, source: torch.Tensor, ref: torch.Tensor,
                   training: bool = False,
                   rng: np.random.Generator | None = None) -> Conditions:
        content = self.content_condition(source, training=training, rng=rng)
        fine, coarse = self.timbre_condition(ref)
        return Conditions(content=content, coarse=coarse, fine=fine)

    @torch.no_grad()
    def convert(self, source: torch.Tensor, ref: torch.Tensor,
                guidance: GuidanceSchedule, t_infer: int, seed: int) -> torch.Tensor:
        """(B, L) source + (B, Lr) reference -> (B, L) converted waveform."""
        self.eval()
        cond = self.conditions(source, ref)
        return fast_sample(self.denoiser, cond, self.schedule, guidance,
                           source.shape[-1], seed, t_infer, batch=source.shape[0])

    def coarse_embedding(self, wav: torch.Tensor) -> torch.Tensor:
        """Frozen-encoder coarse timbre embedding of a waveform, (B, D)."""
        with torch.no_grad():
            fine, coarse = self.timbre_encoder(wav)
        return coarse
