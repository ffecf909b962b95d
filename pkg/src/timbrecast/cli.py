"""Operator command line: corpus generation, two-phase training, conversion,
evaluation, and embedding export.

Exit code 0 on success; any contract violation prints a one-line diagnostic
and exits nonzero. The CODIFF_SEED environment variable is the global seed
fallback when --seed is not given.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import os
import sys
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import torch

from . import checkpoints, config as config_mod, data, evaluation, trainer
from .sampler import GuidanceSchedule


def _load_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load(args.config) if getattr(args, "config", None) else config_mod.RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        if not raw:
            raise config_mod.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = raw.strip()
    if overrides:
        text = config_mod.dumps(cfg) + "\n".join(f"{k} = {v}" for k, v in overrides.items())
        cfg = config_mod.loads(text)
    # seed precedence: --seed > --set seed= > CODIFF_SEED env > config file
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    elif "seed" not in overrides and os.environ.get("CODIFF_SEED"):
        cfg = dataclasses.replace(cfg, seed=int(os.environ["CODIFF_SEED"]))
    return cfg


def _read_wav(path: str, expected_rate: int) -> data.Waveform:
    sr, samples = scipy.io.wavfile.read(path)
    if samples.dtype == np.int16:
        samples = samples.astype(np.float32) / 32768.0
    if sr != expected_rate:
        raise data.DataError(
            f"{path}: sample rate {sr} != checkpoint rate {expected_rate} (no silent resampling)")
    return data.Waveform(samples.astype(np.float32), sr)


def cmd_gen_corpus(args) -> int:
    seed = config_mod.global_seed(args.seed)
    records = data.generate_toy_corpus(args.speakers, args.utts, args.utterance_len,
                                       seed, sample_rate=args.sample_rate)
    manifest = data.save_corpus(records, args.out)
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]
    print(f"wrote {len(records)} utterances; manifest {manifest} ({digest})")
    return 0


def cmd_train_codec(args) -> int:
    cfg = _load_config(args)
    records = data.load_corpus(args.manifest)
    ckpt = trainer.train_codec(cfg, records, args.steps, args.out,
                               resume=args.resume, checkpoint_every=args.checkpoint_every)
    config_mod.save(cfg, Path(args.out) / "codec_config.txt")
    print(f"codec checkpoint: {ckpt}")
    return 0


def cmd_train_vc(args) -> int:
    cfg = _load_config(args)
    if args.no_msln:
        cfg = dataclasses.replace(cfg, msln_enabled=False)
    if args.coarse_only:
        cfg = dataclasses.replace(cfg, coarse_only=True)
    if args.resume is None and args.codec_ckpt is None:
        raise trainer.TrainError("train-vc requires --codec-ckpt (train the codec first)")
    records = data.load_corpus(args.manifest)
    ckpt = trainer.train_vc(cfg, records, args.codec_ckpt, args.steps, args.out,
                            resume=args.resume, checkpoint_every=args.checkpoint_every)
    config_mod.save(cfg, Path(args.out) / "vc_config.txt")
    print(f"vc checkpoint: {ckpt}")
    return 0


def _guidance_from(args, cfg) -> GuidanceSchedule:
    ws_start = cfg.ws_start if args.ws_start is None else args.ws_start
    ws_end = cfg.ws_end if args.ws_end is None else args.ws_end
    if args.no_dual_cfg or "no-dual-cfg" in (args.ablate or []):
        ws_start = ws_end = 0.0  # single-guidance mode: content CFG only
    return GuidanceSchedule(
        wc_start=cfg.wc_start if args.wc_start is None else args.wc_start,
        wc_end=cfg.wc_end if args.wc_end is None else args.wc_end,
        ws_start=ws_start, ws_end=ws_end,
        interpolation=args.guidance_interp or cfg.guidance_interp)


def cmd_convert(args) -> int:
    cfg, model, _ = checkpoints.load_vc_checkpoint(args.ckpt)
    if args.coarse_only or "coarse-only" in (args.ablate or []):
        model.cfg = dataclasses.replace(model.cfg, coarse_only=True)
    seed = config_mod.global_seed(args.seed)
    source = data.crop_or_pad(_read_wav(args.source, cfg.sample_rate), cfg.segment_len)
    ref = data.crop_or_pad(_read_wav(args.reference, cfg.sample_rate), cfg.ref_len)
    guidance = _guidance_from(args, cfg)
    t_infer = args.t_infer or cfg.t_infer
    out = model.convert(torch.from_numpy(source.samples).unsqueeze(0),
                        torch.from_numpy(ref.samples).unsqueeze(0),
                        guidance, t_infer, seed)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    scipy.io.wavfile.write(out_path, cfg.sample_rate, out.squeeze(0).numpy())
    meta = [f"seed = {seed}", f"t_infer = {t_infer}",
            f"wc_start = {guidance.wc_start}", f"wc_end = {guidance.wc_end}",
            f"ws_start = {guidance.ws_start}", f"ws_end = {guidance.ws_end}",
            f"guidance_interp = {guidance.interpolation}",
            f"source = {args.source}", f"reference = {args.reference}"]
    out_path.with_suffix(out_path.suffix + ".meta.txt").write_text("\n".join(meta) + "\n")
    print(f"wrote {out_path}")
    return 0


def cmd_eval(args) -> int:
    cfg, model, _ = checkpoints.load_vc_checkpoint(args.ckpt)
    if args.coarse_only or "coarse-only" in (args.ablate or []):
        model.cfg = dataclasses.replace(model.cfg, coarse_only=True)
    seed = config_mod.global_seed(args.seed)
    records = data.load_corpus(args.manifest)
    guidance = _guidance_from(args, cfg)
    report = evaluation.speaker_similarity_eval(
        model, records, args.pairs, seed, guidance, args.t_infer or cfg.t_infer)
    report.aggregates.update(evaluation.reconstruction_snr(model.codec, records, cfg.segment_len))
    report.aggregates["codebook_perplexity"] = evaluation.codebook_perplexity(model.codec, records)
    path = report.write(args.out)
    print(f"wrote {path}")
    for key in ("target_closer_rate", "mean_snr_db", "codebook_perplexity"):
        print(f"{key}: {report.aggregates[key]}")
    return 0


def cmd_export_embeddings(args) -> int:
    _, model, _ = checkpoints.load_vc_checkpoint(args.ckpt)
    records = data.load_corpus(args.manifest)
    if args.clips:
        rng = np.random.default_rng(config_mod.global_seed(args.seed))
        idx = rng.choice(len(records), size=min(args.clips, len(records)), replace=False)
        records = [records[int(i)] for i in sorted(idx)]
    out = evaluation.export_embeddings(model, records, args.out)
    print(f"wrote {out}")
    return 0


def _add_sampler_flags(p: argparse.ArgumentParser):
    p.add_argument("--t-infer", type=int, default=None)
    p.add_argument("--wc-start", type=float, default=None)
    p.add_argument("--wc-end", type=float, default=None)
    p.add_argument("--ws-start", type=float, default=None)
    p.add_argument("--ws-end", type=float, default=None)
    p.add_argument("--guidance-interp", choices=("linear", "cosine"), default=None)
    p.add_argument("--no-dual-cfg", action="store_true",
                   help="single-guidance ablation: force the timbre scale to 0")
    p.add_argument("--coarse-only", action="store_true",
                   help="drop fine-grained timbre (coarse-only ablation)")
    p.add_argument("--ablate", action="append", choices=("no-dual-cfg", "coarse-only"),
                   help="named ablation toggle (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="timbrecast")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="synthesize the toy multi-speaker corpus")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--utts", type=int, required=True)
    p.add_argument("--utterance-len", type=int, default=30720)
    p.add_argument("--sample-rate", type=int, default=24000)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    for name, func, needs_codec in (("train-codec", cmd_train_codec, False),
                                    ("train-vc", cmd_train_vc, True)):
        p = sub.add_parser(name)
        p.add_argument("--manifest", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--steps", type=int, required=True)
        p.add_argument("--config", default=None)
        p.add_argument("--set", action="append", metavar="KEY=VALUE")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--resume", default=None)
        p.add_argument("--checkpoint-every", type=int, default=500)
        if needs_codec:
            p.add_argument("--codec-ckpt", default=None)
            p.add_argument("--no-msln", action="store_true",
                           help="disable Mix-Style layer normalization (ablation)")
            p.add_argument("--coarse-only", action="store_true",
                           help="train without fine-grained timbre (ablation)")
        p.set_defaults(func=func)

    p = sub.add_parser("convert", help="convert a source utterance to a reference timbre")
    p.add_argument("--source", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("eval", help="zero-shot conversion benchmark report")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=50)
    p.add_argument("--seed", type=int, default=None)
    _add_sampler_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-embeddings", help="coarse timbre embedding table")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.manual_seed(0)  # module-level ops must not depend on ambient RNG
    try:
        return args.func(args)
    except Exception as exc:  # contract violations exit nonzero with one line
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
