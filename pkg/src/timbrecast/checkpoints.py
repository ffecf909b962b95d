"""Versioned checkpoint containers. Loaders reject unknown format versions."""

from __future__ import annotations

from pathlib import Path

import torch

from .codec import SpeechCodec
from .config import RunConfig
from .model import VCModel, build_codec

CODEC_FORMAT = "codec-v1"
VC_FORMAT = "vc-v1"


class CheckpointError(RuntimeError):
    pass


def save_codec_checkpoint(path: str | Path, cfg: RunConfig, codec: SpeechCodec,
                          step: int, optimizer: torch.optim.Optimizer | None = None,
                          rng_state: dict | None = None) -> None:
    payload = {
        "format_version": CODEC_FORMAT,
        "config": cfg.to_dict(),
        "step": step,
        "model": codec.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
    }
    torch.save(payload, path)


def load_codec_checkpoint(path: str | Path):
    payload = _load(path, CODEC_FORMAT)
    cfg = RunConfig.from_dict(payload["config"])
    codec = build_codec(cfg)
    codec.load_state_dict(payload["model"])
    return cfg, codec, payload


def save_vc_checkpoint(path: str | Path, cfg: RunConfig, model: VCModel,
                       step: int, optimizer: torch.optim.Optimizer | None = None,
                       rng_state: dict | None = None, aux: dict | None = None,
                       ema_model: dict | None = None) -> None:
    payload = {
        "format_version": VC_FORMAT,
        "config": cfg.to_dict(),
        "step": step,
        # the bundle includes the frozen codec, so a vc checkpoint is self-contained
        "model": model.state_dict(),
        "ema_model": ema_model,  # averaged weights; preferred at load time
        "schedule": {"beta_min": cfg.beta_min, "beta_max": cfg.beta_max,
                     "T": cfg.diffusion_steps},
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
        "aux": aux,  # training-only state (e.g. the speaker-classification head)
    }
    torch.save(payload, path)


def load_vc_checkpoint(path: str | Path):
    payload = _load(path, VC_FORMAT)
    cfg = RunConfig.from_dict(payload["config"])
    model = VCModel(cfg, build_codec(cfg))
    state = payload.get("ema_model") or payload["model"]
    model.load_state_dict(state)
    model.eval()
    return cfg, model, payload


def _load(path: str | Path, expected_format: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != expected_format:
        raise CheckpointError(
            f"{path} has format {version!r}, expected {expected_format!r}")
    return payload
