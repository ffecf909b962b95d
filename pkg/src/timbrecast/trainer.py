"""Training loops for the codec and the conversion model, with loss logs,
periodic checkpoints, and deterministic resume."""

from __future__ import annotations

import logging
import math
import time
from pathlib import Path

import numpy as np
import torch

from . import checkpoints, plotting
from .config import RunConfig
from .data import UtteranceRecord, crop_or_pad, select_reference_clip
from .diffusion import Conditions, apply_condition_dropout, training_loss
from .model import VCModel, build_codec

logger = logging.getLogger(__name__)


class TrainError(RuntimeError):
    pass


def _train_records(records: list[UtteranceRecord]) -> list[UtteranceRecord]:
    train = [r for r in records if r.split == "train"]
    if not train:
        raise TrainError("corpus has no train-split records")
    return train


def _segment_batch(records: list[UtteranceRecord], batch_size: int, segment_len: int,
                   rng: np.random.Generator):
    idx = rng.integers(0, len(records), batch_size)
    recs = [records[int(i)] for i in idx]
    wavs = [crop_or_pad(r.waveform, segment_len, training=True, rng=rng) for r in recs]
    batch = torch.from_numpy(np.stack([w.samples for w in wavs]))
    return batch, recs


def lr_at(base_lr: float, decay: str, step: int, total_steps: int) -> float:
    """Learning rate for 1-based `step` of `total_steps` under the decay policy."""
    if decay == "none" or total_steps <= 1:
        return base_lr
    progress = (step - 1) / (total_steps - 1)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


def _rng_state(np_rng: np.random.Generator, torch_g: torch.Generator) -> dict:
    return {"numpy": np_rng.bit_generator.state, "torch": torch_g.get_state()}


def _restore_rng(state: dict, np_rng: np.random.Generator, torch_g: torch.Generator):
    np_rng.bit_generator.state = state["numpy"]
    torch_g.set_state(state["torch"])


def train_codec(cfg: RunConfig, records: list[UtteranceRecord], steps: int,
                out_dir: str | Path, resume: str | Path | None = None,
                checkpoint_every: int = 500) -> Path:
    """Train the codec for `steps` additional steps; returns the checkpoint path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = _train_records(records)
    np_rng = np.random.default_rng(cfg.seed)
    torch_g = torch.Generator().manual_seed(cfg.seed)

    codec = build_codec(cfg)
    opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
    start_step = 0
    if resume is not None:
        loaded_cfg, codec, payload = checkpoints.load_codec_checkpoint(resume)
        if loaded_cfg != cfg:
            logger.warning("resuming with config from checkpoint, overriding current")
            cfg = loaded_cfg
        opt = torch.optim.Adam(codec.parameters(), lr=cfg.lr)
        if payload["optimizer"] is not None:
            opt.load_state_dict(payload["optimizer"])
        if payload["rng_state"] is not None:
            _restore_rng(payload["rng_state"], np_rng, torch_g)
        start_step = payload["step"]

    log_path = out / "codec_loss.log"
    ckpt_path = out / "codec.pt"
    codec.train()
    losses = []
    t0 = time.time()
    with log_path.open("a") as log:
        for step in range(start_step + 1, start_step + steps + 1):
            # decay is applied over the steps of this invocation
            _set_lr(opt, lr_at(cfg.lr, cfg.lr_decay, step - start_step, steps))
            wav, recs = _segment_batch(train, cfg.batch_size, cfg.segment_len, np_rng)
            # reference: a different random segment of the same utterance
            refs = [crop_or_pad(r.waveform, cfg.ref_len, training=True, rng=np_rng)
                    for r in recs]
            ref = torch.from_numpy(np.stack([w.samples for w in refs]))
            loss, metrics = codec.training_step(wav, ref, g=torch_g)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(metrics["loss"])
            log.write(f"{step}\t{metrics['loss']:.6f}\n")
            if step % 50 == 0:
                logger.info("codec step %d loss %.4f (used %d codes) [%.0fs]",
                            step, metrics["loss"], metrics["tokens_used"], time.time() - t0)
            if step % checkpoint_every == 0 or step == start_step + steps:
                checkpoints.save_codec_checkpoint(
                    ckpt_path, cfg, codec, step, opt, _rng_state(np_rng, torch_g))
    plotting.loss_curve(log_path, out / "codec_loss.png", title="codec training loss")
    return ckpt_path


def _speaker_classifier(cfg: RunConfig, speakers: list[str]) -> torch.nn.Linear | None:
    """Training-only head: pushes the coarse embedding to separate speakers.

    The diffusion loss alone gives the timbre encoder almost no gradient at
    small scale and its output collapses to a constant; a light
    speaker-classification term keeps the embedding discriminative.
    """
    if cfg.aux_speaker_weight == 0.0:
        return None
    torch.manual_seed(cfg.seed + 2)  # deterministic head init
    return torch.nn.Linear(cfg.timbre_dim, len(speakers))


def _optimized_parameters(model: VCModel, classifier: torch.nn.Linear | None):
    params = list(model.trainable_parameters())
    if classifier is not None:
        params += list(classifier.parameters())
    return params


def train_vc(cfg: RunConfig, records: list[UtteranceRecord], codec_ckpt: str | Path,
             steps: int, out_dir: str | Path, resume: str | Path | None = None,
             checkpoint_every: int = 500) -> Path:
    """Train the conversion model on top of a frozen codec checkpoint."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train = _train_records(records)
    np_rng = np.random.default_rng(cfg.seed + 1)
    torch_g = torch.Generator().manual_seed(cfg.seed + 1)

    speakers = sorted({r.speaker_id for r in train})
    start_step = 0
    if resume is not None:
        cfg, model, payload = checkpoints.load_vc_checkpoint(resume)
        # the loader prefers the averaged weights; training continues from the raw ones
        model.load_state_dict(payload["model"])
        classifier = _speaker_classifier(cfg, speakers)
        opt = torch.optim.Adam(_optimized_parameters(model, classifier), lr=cfg.lr)
        aux = payload.get("aux")
        if classifier is not None and aux is not None:
            if aux["speakers"] != speakers:
                raise TrainError("resume corpus has different train speakers")
            classifier.load_state_dict(aux["classifier"])
        if payload["optimizer"] is not None:
            opt.load_state_dict(payload["optimizer"])
        if payload["rng_state"] is not None:
            _restore_rng(payload["rng_state"], np_rng, torch_g)
        start_step = payload["step"]
    else:
        codec_cfg, codec, _ = checkpoints.load_codec_checkpoint(codec_ckpt)
        if codec_cfg.codebook_size != cfg.codebook_size or codec_cfg.code_dim != cfg.code_dim:
            raise TrainError("codec checkpoint config does not match run config")
        model = VCModel(cfg, codec)
        classifier = _speaker_classifier(cfg, speakers)
        opt = torch.optim.Adam(_optimized_parameters(model, classifier), lr=cfg.lr)

    ema = None
    if cfg.weight_ema_decay > 0:
        if resume is not None and payload.get("ema_model"):
            ema = {k: v.clone() for k, v in payload["ema_model"].items()}
        else:
            ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    model.codec.eval()
    log_path = out / "vc_loss.log"
    ckpt_path = out / "vc.pt"
    t0 = time.time()
    with log_path.open("a") as log:
        for step in range(start_step + 1, start_step + steps + 1):
            _set_lr(opt, lr_at(cfg.lr, cfg.lr_decay, step - start_step, steps))
            model.content_encoder.train()
            model.timbre_encoder.train()
            model.denoiser.train()
            wav, recs = _segment_batch(train, cfg.batch_size, cfg.segment_len, np_rng)
            refs = []
            for r in recs:
                # reference from the same speaker, preferably a different utterance
                pool = [q for q in train if q.speaker_id == r.speaker_id
                        and q.utterance_id != r.utterance_id] or [r]
                clip = select_reference_clip(pool, r.speaker_id, cfg.ref_len,
                                             seed=int(np_rng.integers(0, 2 ** 31)))
                refs.append(clip)
            ref = torch.from_numpy(np.stack([w.samples for w in refs]))
            content = model.content_condition(wav, training=True, rng=np_rng)
            fine, coarse = model.timbre_condition(ref)
            cond = Conditions(content=content, coarse=coarse, fine=fine)
            cond = apply_condition_dropout(cond, cfg.dropout_rate, torch_g)
            loss = training_loss(model.denoiser, wav, cond, model.schedule, torch_g)
            if classifier is not None:
                labels = torch.tensor([speakers.index(r.speaker_id) for r in recs])
                loss = loss + cfg.aux_speaker_weight * torch.nn.functional.cross_entropy(
                    classifier(coarse), labels)
            opt.zero_grad()
            loss.backward()
            opt.step()
            if ema is not None:
                with torch.no_grad():
                    # ramp the decay up so early averages are not biased toward the init
                    d = min(cfg.weight_ema_decay, (1 + step) / (10 + step))
                    for k, v in model.state_dict().items():
                        if ema[k].dtype.is_floating_point:
                            ema[k].mul_(d).add_(v, alpha=1.0 - d)
                        else:
                            ema[k].copy_(v)
            log.write(f"{step}\t{loss.item():.6f}\n")
            if step % 50 == 0:
                logger.info("vc step %d loss %.4f [%.0fs]", step, loss.item(), time.time() - t0)
            if step % checkpoint_every == 0 or step == start_step + steps:
                aux = None
                if classifier is not None:
                    aux = {"speakers": speakers, "classifier": classifier.state_dict()}
                checkpoints.save_vc_checkpoint(
                    ckpt_path, cfg, model, step, opt, _rng_state(np_rng, torch_g), aux=aux,
                    ema_model=ema)
    plotting.loss_curve(log_path, out / "vc_loss.png", title="conversion training loss")
    return ckpt_path
