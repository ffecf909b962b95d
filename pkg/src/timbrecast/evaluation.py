"""Objective desk-scale evaluation: speaker cosine similarity against
per-speaker centroids, codec reconstruction SNR, codebook perplexity, and a
content-token round-trip rate as the intelligibility proxy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .codec import SpeechCodec
from .data import UtteranceRecord, crop_or_pad, select_reference_clip
from .model import VCModel
from .sampler import GuidanceSchedule
from .timbre import cosine_similarity

SNR_CAP_DB = 100.0
SNR_FLOOR_DB = 0.0


class EvalError(ValueError):
    pass


@dataclass
class ConversionRow:
    source_utterance: str
    source_speaker: str
    target_speaker: str
    cos_to_target_centroid: float
    cos_to_source_centroid: float
    token_match_rate: float


@dataclass
class EvalReport:
    rows: list[ConversionRow]
    aggregates: dict
    config_echo: dict = field(default_factory=dict)

    def write(self, out_dir: str | Path) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        lines = [f"{k}: {v}" for k, v in self.aggregates.items()]
        lines.append("")
        lines += [f"config.{k}: {v}" for k, v in self.config_echo.items()]
        (out / "report.txt").write_text("\n".join(lines) + "\n")
        header = ("source_utterance\tsource_speaker\ttarget_speaker\t"
                  "cos_to_target_centroid\tcos_to_source_centroid\ttoken_match_rate")
        rows = [f"{r.source_utterance}\t{r.source_speaker}\t{r.target_speaker}\t"
                f"{r.cos_to_target_centroid:.6f}\t{r.cos_to_source_centroid:.6f}\t"
                f"{r.token_match_rate:.6f}" for r in self.rows]
        (out / "conversions.tsv").write_text("\n".join([header] + rows) + "\n")
        if self.rows:
            plotting.similarity_hist(
                [r.cos_to_target_centroid for r in self.rows],
                [r.cos_to_source_centroid for r in self.rows],
                out / "similarity_hist.png")
        return out / "report.txt"


def _embed(model: VCModel, wav: torch.Tensor) -> torch.Tensor:
    return model.coarse_embedding(wav).squeeze(0)


def speaker_centroids(model: VCModel, records: list[UtteranceRecord],
                      clip_len: int) -> dict[str, torch.Tensor]:
    by_speaker: dict[str, list[torch.Tensor]] = {}
    for r in records:
        w = crop_or_pad(r.waveform, clip_len)
        emb = _embed(model, torch.from_numpy(w.samples).unsqueeze(0))
        by_speaker.setdefault(r.speaker_id, []).append(emb)
    return {spk: torch.stack(e).mean(0) for spk, e in by_speaker.items()}


def speaker_similarity_eval(model: VCModel, records: list[UtteranceRecord],
                            n_pairs: int, seed: int,
                            guidance: GuidanceSchedule | None = None,
                            t_infer: int | None = None) -> EvalReport:
    """Convert n_pairs zero-shot (source utterance, target speaker) pairs and
    score them against real-clip centroids of the frozen coarse encoder."""
    cfg = model.cfg
    test = [r for r in records if r.split == "test"]
    speakers = sorted({r.speaker_id for r in test})
    if len(speakers) < 2:
        raise EvalError("need at least 2 test-split speakers for zero-shot eval")
    guidance = guidance or GuidanceSchedule(cfg.wc_start, cfg.wc_end,
                                            cfg.ws_start, cfg.ws_end, cfg.guidance_interp)
    t_infer = t_infer or cfg.t_infer

    centroids = speaker_centroids(model, test, cfg.ref_len)
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_pairs):
        src = test[int(rng.integers(0, len(test)))]
        target = speakers[int(rng.integers(0, len(speakers)))]
        while target == src.speaker_id:
            target = speakers[int(rng.integers(0, len(speakers)))]
        source_wav = crop_or_pad(src.waveform, cfg.segment_len)
        ref = select_reference_clip(test, target, cfg.ref_len,
                                    seed=int(rng.integers(0, 2 ** 31)))
        src_t = torch.from_numpy(source_wav.samples).unsqueeze(0)
        ref_t = torch.from_numpy(ref.samples).unsqueeze(0)
        converted = model.convert(src_t, ref_t, guidance, t_infer, seed=seed * 100003 + i)
        emb = _embed(model, converted)
        with torch.no_grad():
            src_tokens = model.codec.tokenize(src_t)
            conv_tokens = model.codec.tokenize(converted)
        rows.append(ConversionRow(
            source_utterance=src.utterance_id,
            source_speaker=src.speaker_id,
            target_speaker=target,
            cos_to_target_centroid=cosine_similarity(emb, centroids[target]),
            cos_to_source_centroid=cosine_similarity(emb, centroids[src.speaker_id]),
            token_match_rate=float((src_tokens == conv_tokens).float().mean()),
        ))
    closer = [r.cos_to_target_centroid > r.cos_to_source_centroid for r in rows]
    aggregates = {
        "n_pairs": len(rows),
        "target_closer_rate": sum(closer) / len(rows),
        "mean_cos_to_target": sum(r.cos_to_target_centroid for r in rows) / len(rows),
        "mean_cos_to_source": sum(r.cos_to_source_centroid for r in rows) / len(rows),
        "mean_token_match_rate": sum(r.token_match_rate for r in rows) / len(rows),
        "t_infer": t_infer,
        "seed": seed,
    }
    return EvalReport(rows=rows, aggregates=aggregates, config_echo=cfg.to_dict())


def snr_db(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Reconstruction SNR with a cap for exact reconstruction and a defined
    floor for degenerate signals (never NaN)."""
    sig = float(np.sum(np.square(x, dtype=np.float64)))
    err = float(np.sum(np.square(x.astype(np.float64) - x_hat.astype(np.float64))))
    if err == 0.0:
        return SNR_CAP_DB
    if sig == 0.0:
        return SNR_FLOOR_DB
    return min(SNR_CAP_DB, 10.0 * math.log10(sig / err))


def reconstruction_snr(codec: SpeechCodec, records: list[UtteranceRecord],
                       segment_len: int) -> dict:
    test = [r for r in records if r.split == "test"] or records
    values = []
    codec.eval()
    with torch.no_grad():
        for r in test:
            w = crop_or_pad(r.waveform, segment_len)
            x = torch.from_numpy(w.samples).unsqueeze(0)
            x_hat = codec.reconstruct(x)
            values.append(snr_db(w.samples, x_hat.squeeze(0).numpy()))
    return {"mean_snr_db": sum(values) / len(values), "min_snr_db": min(values),
            "n_utterances": len(values)}


def codebook_perplexity(codec: SpeechCodec, records: list[UtteranceRecord]) -> float:
    """exp(entropy) of the empirical token distribution over the corpus."""
    counts = torch.zeros(codec.quantizer.codebook.shape[0], dtype=torch.float64)
    codec.eval()
    with torch.no_grad():
        for r in records:
            tokens = codec.tokenize(torch.from_numpy(r.waveform.samples).unsqueeze(0))
            counts += torch.bincount(tokens.reshape(-1), minlength=len(counts)).double()
    probs = counts / counts.sum()
    nz = probs[probs > 0]
    return float(torch.exp(-(nz * nz.log()).sum()))


def export_embeddings(model: VCModel, records: list[UtteranceRecord],
                      out_path: str | Path, clip_len: int | None = None) -> Path:
    """Coarse timbre embeddings, one line per clip:
    `utterance_id<TAB>speaker_id<TAB>comma-separated floats`, plus a PCA figure."""
    clip_len = clip_len or model.cfg.ref_len
    lines, embs, labels = [], [], []
    for r in records:
        w = crop_or_pad(r.waveform, clip_len)
        emb = _embed(model, torch.from_numpy(w.samples).unsqueeze(0)).numpy()
        lines.append(r.utterance_id + "\t" + r.speaker_id + "\t" +
                     ",".join(f"{v:.6g}" for v in emb))
        embs.append(emb)
        labels.append(r.speaker_id)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(lines) + "\n")
    if len(embs) >= 3:
        plotting.embedding_scatter(np.stack(embs), labels, out.with_suffix(".png"))
    return out
