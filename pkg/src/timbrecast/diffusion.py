"""Waveform DDPM core: linear noise schedule, closed-form forward noising,
a dilated-conv denoiser with coarse-timbre/timestep fusion and fine-timbre
cross-attention, the unweighted noise-prediction loss, and per-condition
training dropout for classifier-free guidance."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .nets import timestep_embedding


class DiffusionError(ValueError):
    pass


# ---------------------------------------------------------------------------
# noise schedule

@dataclass(frozen=True)
class NoiseSchedule:
    """beta/alpha/alpha-bar tables, indexed by t in [1, T]."""
    betas: torch.Tensor       # float64, (T,)
    alphas: torch.Tensor      # 1 - beta
    alpha_bars: torch.Tensor  # cumulative product of alphas

    @property
    def T(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """alpha_bar(0) is defined as 1."""
        if t == 0:
            return 1.0
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int):
        if not 1 <= t <= self.T:
            raise DiffusionError(f"timestep {t} outside [1, {self.T}]")


def make_linear_schedule(beta_min: float, beta_max: float, T: int) -> NoiseSchedule:
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise DiffusionError(f"need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]")
    if T < 2:
        raise DiffusionError("need T >= 2")
    betas = torch.linspace(beta_min, beta_max, T, dtype=torch.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, dim=0))


def q_sample(x0: torch.Tensor, t: int | torch.Tensor, eps: torch.Tensor,
             sched: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps.

    t may be a scalar step or a (B,) tensor of per-sample steps.
    """
    if torch.is_tensor(t):
        for tv in t.tolist():
            sched._check_t(int(tv))
        ab = sched.alpha_bars.to(x0.dtype)[t - 1].view(-1, *([1] * (x0.dim() - 1)))
        return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    sched._check_t(t)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# conditions

@dataclass(frozen=True)
class Conditions:
    """Content and timbre conditions; None or a True mask entry means ABSENT
    (the denoiser substitutes its learned null embeddings).

    content: (B, L, Cc) upsampled content; coarse: (B, D); fine: (B, F, D).
    coarse and fine are one joint timbre condition: jointly present or absent.
    """
    content: torch.Tensor | None = None
    coarse: torch.Tensor | None = None
    fine: torch.Tensor | None = None
    content_absent: torch.Tensor | None = None  # (B,) bool
    timbre_absent: torch.Tensor | None = None   # (B,) bool

    def __post_init__(self):
        if (self.coarse is None) != (self.fine is None):
            raise DiffusionError("coarse and fine timbre must be jointly present or absent")

    def without_content(self) -> "Conditions":
        return replace(self, content=None, content_absent=None)

    def without_timbre(self) -> "Conditions":
        return replace(self, coarse=None, fine=None, timbre_absent=None)


def apply_condition_dropout(cond: Conditions, rate: float, g: torch.Generator) -> Conditions:
    """Mark content / timbre ABSENT with independent per-sample probability."""
    if not 0.0 <= rate < 1.0:
        raise DiffusionError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return cond
    ref = cond.content if cond.content is not None else cond.coarse
    if ref is None:
        return cond
    b = ref.shape[0]
    draw = torch.rand(b, 2, generator=g) < rate
    content_absent = draw[:, 0]
    timbre_absent = draw[:, 1]
    if cond.content_absent is not None:
        content_absent = content_absent | cond.content_absent
    if cond.timbre_absent is not None:
        timbre_absent = timbre_absent | cond.timbre_absent
    return replace(cond, content_absent=content_absent, timbre_absent=timbre_absent)


# ---------------------------------------------------------------------------
# denoiser

@dataclass(frozen=True)
class UNetConfig:
    n_blocks: int = 30
    base_dim: int = 128
    cross_attn_every: int = 4
    query_downsample: int = 256
    content_dim: int = 128
    timbre_dim: int = 128
    temb_dim: int = 128
    attn_heads: int = 4
    dilation_cycle: int = 512  # max dilation; the per-block cycle is 1,2,...,max


class CrossAttentionFuse(nn.Module):
    """Latent downsampled by `factor` queries the fine-timbre frames; the
    attention output is upsampled back and residually added."""

    def __init__(self, channels: int, timbre_dim: int, factor: int, heads: int):
        super().__init__()
        self.factor = factor
        self.query_proj = nn.Linear(channels, channels)
        self.kv_proj = nn.Linear(timbre_dim, channels)
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.out_proj = nn.Linear(channels, channels)
        self.last_attn_weights: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, fine: torch.Tensor) -> torch.Tensor:
        # x: (B, C, L); fine: (B, F, D)
        if x.shape[-1] % self.factor:
            raise DiffusionError(f"latent length {x.shape[-1]} not divisible by {self.factor}")
        q = F.avg_pool1d(x, self.factor).transpose(1, 2)  # (B, L/factor, C)
        kv = self.kv_proj(fine)
        out, weights = self.attn(self.query_proj(q), kv, kv, need_weights=True)
        self.last_attn_weights = weights.detach()
        out = self.out_proj(out).transpose(1, 2)
        return x + out.repeat_interleave(self.factor, dim=2)


class _ResidualBlock(nn.Module):
    def __init__(self, channels: int, content_dim: int, cond_dim: int, dilation: int):
        super().__init__()
        self.dilated = nn.Conv1d(channels, 2 * channels, kernel_size=3,
                                 padding=dilation, dilation=dilation)
        self.cond_proj = nn.Linear(cond_dim, channels)
        self.content_proj = nn.Conv1d(content_dim, 2 * channels, kernel_size=1)
        self.res_proj = nn.Conv1d(channels, channels, kernel_size=1)
        self.skip_proj = nn.Conv1d(channels, channels, kernel_size=1)

    def forward(self, x, cond_vec, content):
        # x: (B, C, L); cond_vec: (B, cond_dim); content: (B, Cc, L)
        h = x + self.cond_proj(cond_vec).unsqueeze(-1)
        h = self.dilated(h) + self.content_proj(content)
        gate, filt = h.chunk(2, dim=1)
        h = torch.sigmoid(gate) * torch.tanh(filt)
        return (x + self.res_proj(h)) / math.sqrt(2.0), self.skip_proj(h)


class UNetDenoiser(nn.Module):
    """Non-downsampling residual dilated-conv denoiser.

    The coarse timbre vector is concatenated with the timestep embedding and
    fed to every residual block; fine timbre enters through cross-attention
    after every `cross_attn_every`-th block. Absent conditions are replaced
    by learned null embeddings.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Conv1d(1, cfg.base_dim, kernel_size=1)
        self.temb_mlp = nn.Sequential(
            nn.Linear(cfg.temb_dim, cfg.temb_dim), nn.SiLU(),
            nn.Linear(cfg.temb_dim, cfg.temb_dim))
        cond_dim = cfg.temb_dim + cfg.timbre_dim
        self.blocks = nn.ModuleList(
            _ResidualBlock(cfg.base_dim, cfg.content_dim, cond_dim,
                           dilation=2 ** (i % int(math.log2(cfg.dilation_cycle) + 1)))
            for i in range(cfg.n_blocks))
        self.cross_attns = nn.ModuleDict({
            str(i): CrossAttentionFuse(cfg.base_dim, cfg.timbre_dim,
                                       cfg.query_downsample, cfg.attn_heads)
            for i in range(cfg.n_blocks) if (i + 1) % cfg.cross_attn_every == 0})
        self.null_content = nn.Parameter(torch.zeros(cfg.content_dim))
        self.null_coarse = nn.Parameter(torch.zeros(cfg.timbre_dim))
        self.null_fine = nn.Parameter(torch.zeros(cfg.timbre_dim))
        self.out = nn.Sequential(
            nn.SiLU(), nn.Conv1d(cfg.base_dim, cfg.base_dim, kernel_size=1),
            nn.SiLU(), nn.Conv1d(cfg.base_dim, 1, kernel_size=1))
        nn.init.zeros_(self.out[-1].weight)
        nn.init.zeros_(self.out[-1].bias)

    def _resolve(self, cond: Conditions, b: int, length: int, dtype, device):
        """Substitute null embeddings for absent conditions."""
        if cond.content is None:
            content = self.null_content.to(dtype).expand(b, length, -1)
        else:
            if cond.content.shape[1] != length:
                raise DiffusionError(
                    f"content length {cond.content.shape[1]} != waveform length {length}")
            content = cond.content.to(dtype)
            if cond.content_absent is not None:
                mask = cond.content_absent.view(b, 1, 1)
                content = torch.where(mask, self.null_content.to(dtype), content)
        if cond.coarse is None:
            coarse = self.null_coarse.to(dtype).expand(b, -1)
            fine = self.null_fine.to(dtype).expand(b, 1, -1)
        else:
            coarse = cond.coarse.to(dtype)
            fine = cond.fine.to(dtype)
            if cond.timbre_absent is not None:
                mask = cond.timbre_absent.view(b, 1)
                coarse = torch.where(mask, self.null_coarse.to(dtype), coarse)
                fine = torch.where(mask.unsqueeze(-1), self.null_fine.to(dtype), fine)
        return content.transpose(1, 2), coarse, fine

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: Conditions) -> torch.Tensor:
        """x_t: (B, L); t: (B,) integer steps in [1, T]; returns predicted noise (B, L)."""
        b, length = x_t.shape
        dtype = x_t.dtype
        content, coarse, fine = self._resolve(cond, b, length, dtype, x_t.device)
        temb = self.temb_mlp(timestep_embedding(t.to(dtype), self.cfg.temb_dim))
        cond_vec = torch.cat([temb, coarse], dim=-1)
        h = F.silu(self.input_proj(x_t.unsqueeze(1)))
        skips = torch.zeros_like(h)
        for i, block in enumerate(self.blocks):
            h, skip = block(h, cond_vec, content)
            skips = skips + skip
            key = str(i)
            if key in self.cross_attns:
                h = self.cross_attns[key](h, fine)
        out = self.out(skips / math.sqrt(len(self.blocks)))
        return out.squeeze(1)


def training_loss(denoiser: UNetDenoiser, x0: torch.Tensor, cond: Conditions,
                  sched: NoiseSchedule, g: torch.Generator,
                  t: int | torch.Tensor | None = None,
                  eps: torch.Tensor | None = None) -> torch.Tensor:
    """Unweighted noise-prediction objective with per-sample uniform t.

    t and eps may be pinned for deterministic verification; by default t is
    drawn uniformly on [1, T] per sample and eps standard normal from g.
    """
    if t is None:
        t_vec = torch.randint(1, sched.T + 1, (x0.shape[0],), generator=g)
    elif torch.is_tensor(t):
        t_vec = t.long()
    else:
        t_vec = torch.full((x0.shape[0],), t, dtype=torch.long)
    if eps is None:
        eps = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
    x_t = q_sample(x0, t_vec, eps, sched)
    eps_hat = denoiser(x_t, t_vec, cond)
    loss = F.mse_loss(eps_hat, eps)
    if not torch.isfinite(loss):
        raise DiffusionError(f"non-finite diffusion loss at t={t_vec.tolist()}")
    return loss
