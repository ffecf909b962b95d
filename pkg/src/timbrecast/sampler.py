"""Reverse-process inference: dual classifier-free guidance with
annealing/hardening scale schedules, ancestral sampling, and fast sampling
on a reduced noise-level schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .diffusion import Conditions, DiffusionError, NoiseSchedule


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class GuidanceSchedule:
    """Content scale anneals (start -> end, nonincreasing) and timbre scale
    hardens (nondecreasing) over generation progress."""
    wc_start: float = 1.0
    wc_end: float = 0.2
    ws_start: float = 0.3
    ws_end: float = 1.2
    interpolation: str = "linear"

    def __post_init__(self):
        if min(self.wc_start, self.wc_end, self.ws_start, self.ws_end) < 0:
            raise SamplerError("guidance scales must be nonnegative")
        if self.wc_start < self.wc_end:
            raise SamplerError("content guidance must be nonincreasing (wc_start >= wc_end)")
        if self.ws_start > self.ws_end:
            raise SamplerError("timbre guidance must be nondecreasing (ws_start <= ws_end)")
        if self.interpolation not in ("linear", "cosine"):
            raise SamplerError(f"unknown interpolation {self.interpolation!r}")


def guidance_at(step_index: int, total_steps: int, g: GuidanceSchedule) -> tuple[float, float]:
    """Scales for reverse step `step_index` (1 = first, noisiest)."""
    if not 1 <= step_index <= total_steps:
        raise SamplerError(f"step_index {step_index} outside [1, {total_steps}]")
    p = (step_index - 1) / (total_steps - 1) if total_steps > 1 else 0.0
    if g.interpolation == "cosine":
        p = (1.0 - math.cos(math.pi * p)) / 2.0
    w_c = g.wc_start + (g.wc_end - g.wc_start) * p
    w_s = g.ws_start + (g.ws_end - g.ws_start) * p
    return w_c, w_s


def dual_cfg_epsilon(denoise_fn, x_t: torch.Tensor, t: torch.Tensor, cond: Conditions,
                     w_c: float, w_s: float) -> torch.Tensor:
    """(1 + w_c + w_s) * eps(full) - w_c * eps(timbre only) - w_s * eps(content only)."""
    eps_full = denoise_fn(x_t, t, cond)
    if w_c == 0.0 and w_s == 0.0:
        return eps_full
    eps_timbre = denoise_fn(x_t, t, cond.without_content())
    eps_content = denoise_fn(x_t, t, cond.without_timbre())
    return (1.0 + w_c + w_s) * eps_full - w_c * eps_timbre - w_s * eps_content


def reverse_step(x_t: torch.Tensor, eps_hat: torch.Tensor,
                 beta_t: float, alpha_bar_t: float, alpha_bar_prev: float,
                 final: bool, g: torch.Generator) -> torch.Tensor:
    """One posterior step; no noise is injected on the final step."""
    alpha_t = alpha_bar_t / alpha_bar_prev
    mean = (x_t - (beta_t / math.sqrt(1.0 - alpha_bar_t)) * eps_hat) / math.sqrt(alpha_t)
    if final:
        return mean
    var = beta_t * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t)
    z = torch.randn(x_t.shape, generator=g, dtype=x_t.dtype)
    return mean + math.sqrt(var) * z


def reverse_step_at(x_t: torch.Tensor, t: int, eps_hat: torch.Tensor,
                    sched: NoiseSchedule, g: torch.Generator) -> torch.Tensor:
    """reverse_step on the trained schedule at integer timestep t (1-based)."""
    sched._check_t(t)
    return reverse_step(x_t, eps_hat, sched.beta(t), sched.alpha_bar(t),
                        sched.alpha_bar(t - 1), final=(t == 1), g=g)


def _run_reverse(denoiser, cond: Conditions, alpha_bars: torch.Tensor,
                 t_map: list[int], guidance: GuidanceSchedule,
                 shape: tuple[int, ...], seed: int) -> torch.Tensor:
    """Shared reverse recursion over an alpha-bar table (levels 1..S).

    t_map[s-1] is the trained timestep fed to the denoiser at level s.
    """
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=g)
    steps = len(alpha_bars)
    for idx, s in enumerate(range(steps, 0, -1), start=1):
        ab_t = float(alpha_bars[s - 1])
        ab_prev = float(alpha_bars[s - 2]) if s > 1 else 1.0
        beta = 1.0 - ab_t / ab_prev
        w_c, w_s = guidance_at(idx, steps, guidance)
        t_vec = torch.full((shape[0],), t_map[s - 1], dtype=torch.long)
        eps_hat = dual_cfg_epsilon(denoiser, x, t_vec, cond, w_c, w_s)
        x = reverse_step(x, eps_hat, beta, ab_t, ab_prev, final=(s == 1), g=g)
    return x.clamp(-1.0, 1.0)


def ancestral_sample(denoiser, cond: Conditions, sched: NoiseSchedule,
                     guidance: GuidanceSchedule, length: int, seed: int,
                     batch: int = 1) -> torch.Tensor:
    """Full reverse Markov chain over all trained steps; (B, length) in [-1, 1]."""
    t_map = list(range(1, sched.T + 1))
    return _run_reverse(denoiser, cond, sched.alpha_bars, t_map, guidance,
                        (batch, length), seed)


def reduced_alpha_bars(sched: NoiseSchedule, t_infer: int) -> torch.Tensor:
    """Geometric interpolation of alpha-bar over the trained range.

    Level t_infer is the noisiest (alpha_bar_T); a single level degenerates to
    the one-jump estimate from alpha_bar_T.
    """
    if not 1 <= t_infer <= sched.T:
        raise SamplerError(f"t_infer must be in [1, {sched.T}]")
    log_top = math.log(sched.alpha_bar(sched.T))
    log_bot = math.log(sched.alpha_bar(1))
    logs = torch.linspace(log_top, log_bot, t_infer, dtype=torch.float64)
    return torch.flip(torch.exp(logs), dims=(0,))


def fast_sample(denoiser, cond: Conditions, sched: NoiseSchedule,
                guidance: GuidanceSchedule, length: int, seed: int,
                t_infer: int, batch: int = 1) -> torch.Tensor:
    """Reverse recursion on a reduced schedule of t_infer noise levels, each
    mapped to the nearest trained timestep for the denoiser input. With
    t_infer == T this is exactly the ancestral trajectory."""
    if t_infer == sched.T:
        return ancestral_sample(denoiser, cond, sched, guidance, length, seed, batch)
    abars = reduced_alpha_bars(sched, t_infer)
    trained = sched.alpha_bars.unsqueeze(0)  # (1, T)
    t_map = [int((trained - ab).abs().argmin()) + 1 for ab in abars]
    return _run_reverse(denoiser, cond, abars, t_map, guidance, (batch, length), seed)
