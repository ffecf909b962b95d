"""Run configuration: every tunable in one flat, diff-able record.

Config files are flat ``key = value`` text with ``#`` comments. CLI flags
override file values, and the merged config is echoed into every checkpoint
so checkpoints are self-describing.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # audio contract
    sample_rate: int = 24000
    segment_len: int = 30720  # training crop length, samples (multiple of 256)
    ref_len: int = 30720      # reference clip length, samples (multiple of 256)

    # codec
    codebook_size: int = 4096
    code_dim: int = 128
    hop: int = 256            # samples per token; fixed by the 256x alignment
    codec_channels: str = "32,64,128,128"
    commitment_weight: float = 0.25
    ema_decay: float = 0.99
    dead_code_steps: int = 200

    # content path
    content_dim: int = 128
    msln_alpha: float = 0.1
    msln_prob: float = 0.5
    msln_enabled: bool = True

    # timbre path
    timbre_dim: int = 128
    timbre_layers: int = 2
    timbre_heads: int = 4

    # denoiser
    n_blocks: int = 30
    base_dim: int = 128
    cross_attn_every: int = 4
    query_downsample: int = 256
    dilation_cycle: int = 512  # max conv dilation; sets the receptive field

    # noise schedule
    beta_min: float = 1e-4
    beta_max: float = 0.02
    diffusion_steps: int = 200

    # training
    batch_size: int = 16
    lr: float = 1e-4
    lr_decay: str = "none"  # none | cosine (annealed to ~0 over the run)
    aux_speaker_weight: float = 0.1  # speaker-classification loss on the coarse embedding
    weight_ema_decay: float = 0.999  # EMA of conversion-model weights; 0 disables
    dropout_rate: float = 0.15
    coarse_only: bool = False  # ablation: drop fine-grained timbre

    # sampling
    t_infer: int = 10
    wc_start: float = 1.0
    wc_end: float = 0.2
    ws_start: float = 0.3
    ws_end: float = 1.2
    guidance_interp: str = "linear"

    seed: int = 0

    def __post_init__(self):
        if self.hop != 256:
            raise ConfigError(f"hop is fixed at 256 (got {self.hop})")
        if self.segment_len <= 0 or self.segment_len % self.hop:
            raise ConfigError(f"segment_len must be a positive multiple of {self.hop}")
        if self.ref_len <= 0 or self.ref_len % self.hop:
            raise ConfigError(f"ref_len must be a positive multiple of {self.hop}")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.dilation_cycle < 1 or self.dilation_cycle & (self.dilation_cycle - 1):
            raise ConfigError("dilation_cycle must be a power of two")
        if self.aux_speaker_weight < 0:
            raise ConfigError("aux_speaker_weight must be >= 0")
        if not 0.0 <= self.weight_ema_decay < 1.0:
            raise ConfigError("weight_ema_decay must be in [0, 1)")
        if self.lr_decay not in ("none", "cosine"):
            raise ConfigError(f"unknown lr_decay {self.lr_decay!r}")
        if self.guidance_interp not in ("linear", "cosine"):
            raise ConfigError(f"unknown guidance_interp {self.guidance_interp!r}")
        if not 0.0 <= self.msln_prob <= 1.0:
            raise ConfigError("msln_prob must be in [0, 1]")
        if not 1 <= self.t_infer <= self.diffusion_steps:
            raise ConfigError("t_infer must be in [1, diffusion_steps]")

    def channels(self) -> list[int]:
        return [int(c) for c in self.codec_channels.split(",")]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


def _parse_value(field_type: type, raw: str):
    if field_type is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"bad boolean {raw!r}")
    return field_type(raw)


def loads(text: str) -> RunConfig:
    """Parse flat key = value config text."""
    types = {f.name: f.type for f in fields(RunConfig)}
    # dataclass field types may be strings under `from __future__ import annotations`
    resolved = {"int": int, "float": float, "str": str, "bool": bool}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        ftype = types[key]
        if isinstance(ftype, str):
            ftype = resolved[ftype]
        values[key] = _parse_value(ftype, raw)
    return RunConfig.from_dict({**RunConfig().to_dict(), **values})


def dumps(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {getattr(cfg, f.name)}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def load(path: str | os.PathLike) -> RunConfig:
    return loads(Path(path).read_text())


def save(cfg: RunConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dumps(cfg))


def global_seed(cli_seed: int | None) -> int:
    """CLI seed if given, else the CODIFF_SEED env var, else 0."""
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get("CODIFF_SEED")
    return int(env) if env else 0
