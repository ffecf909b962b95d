"""Toy multi-speaker corpus: parametric harmonic voices with controllable identity.

Each synthetic speaker is defined by a fundamental frequency, a harmonic
amplitude profile, a vibrato rate, and a noise floor. Utterances of one
speaker share the harmonic profile but carry different random melodies, so
"content" (the pitch contour) and "timbre" (the spectral profile) are
mathematically separable ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io.wavfile

HOP = 256


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray  # float32, [-1, 1]
    sample_rate: int = 24000

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float32)
        object.__setattr__(self, "samples", s)
        if s.ndim != 1 or len(s) == 0 or len(s) % HOP:
            raise DataError(f"waveform length must be a positive multiple of {HOP}, got {s.shape}")
        if not np.all(np.isfinite(s)):
            raise DataError("waveform contains non-finite samples")
        if np.max(np.abs(s)) > 1.0 + 1e-6:
            raise DataError("waveform samples must lie in [-1, 1]")

    def __len__(self):
        return len(self.samples)


@dataclass(frozen=True)
class ToySpeakerSpec:
    speaker_id: str
    f0_base: float
    harmonic_amplitudes: tuple[float, ...]  # unit max
    vibrato_rate: float
    noise_floor: float

    def __post_init__(self):
        amps = np.asarray(self.harmonic_amplitudes)
        if len(amps) < 3 or np.any(amps < 0):
            raise DataError("need >= 3 nonnegative harmonic amplitudes")
        if not np.isclose(amps.max(), 1.0):
            raise DataError("harmonic amplitudes must have unit max")


@dataclass(frozen=True)
class UtteranceRecord:
    utterance_id: str
    waveform: Waveform
    speaker_id: str
    split: str  # train | test


def _make_speaker(idx: int, ladder: int, rng: np.random.Generator) -> ToySpeakerSpec:
    # `ladder` places the speaker on the f0 ladder; it is a permutation of the
    # speaker indices so the held-out (highest-index) speakers land inside the
    # pitch range covered by training, not beyond it
    f0 = 110.0 * 2.0 ** (ladder / 4.0 + rng.uniform(-0.05, 0.05))
    n_harm = 6
    rolloff = rng.uniform(0.6, 1.3)
    amps = np.exp(-rolloff * np.arange(n_harm)) * rng.uniform(0.6, 1.0, n_harm)
    if ladder % 2:
        amps[1::2] *= 0.4  # odd-harmonic-dominant voices
    amps = amps / amps.max()
    return ToySpeakerSpec(
        speaker_id=f"spk{idx:02d}",
        f0_base=float(f0),
        harmonic_amplitudes=tuple(float(a) for a in amps),
        vibrato_rate=float(rng.uniform(4.0, 7.0)),
        noise_floor=float(rng.uniform(0.001, 0.004)),
    )


def _synth_utterance(spec: ToySpeakerSpec, n_samples: int, sample_rate: int,
                     rng: np.random.Generator) -> Waveform:
    t = np.arange(n_samples) / sample_rate
    # melody: piecewise-constant semitone offsets, smoothed
    n_notes = max(2, int(np.ceil(n_samples / sample_rate / 0.32)))
    offsets = rng.integers(-4, 5, n_notes).astype(np.float64)
    note_len = int(np.ceil(n_samples / n_notes))
    contour = np.repeat(offsets, note_len)[:n_samples]
    kernel = np.hanning(max(3, sample_rate // 100))
    contour = np.convolve(contour, kernel / kernel.sum(), mode="same")
    vibrato = 0.05 * np.sin(2 * np.pi * spec.vibrato_rate * t + rng.uniform(0, 2 * np.pi))
    f0 = spec.f0_base * 2.0 ** ((contour + vibrato) / 12.0)
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    sig = np.zeros(n_samples)
    # mild per-utterance spectral jitter and brightness tilt: the speaker's
    # profile stays dominant while training coverage spreads around each
    # anchor timbre instead of collapsing onto a few isolated spectra
    n_harm = len(spec.harmonic_amplitudes)
    jitter = rng.uniform(0.8, 1.25, n_harm)
    tilt = np.exp(rng.uniform(-0.3, 0.3) * np.arange(n_harm))
    for k, amp in enumerate(spec.harmonic_amplitudes, start=1):
        sig += amp * jitter[k - 1] * tilt[k - 1] * np.sin(k * phase)
    # slow random amplitude envelope
    env_pts = rng.uniform(0.4, 1.0, 8)
    env = np.interp(np.linspace(0, 7, n_samples), np.arange(8), env_pts)
    sig = sig * env + spec.noise_floor * rng.standard_normal(n_samples)
    sig = 0.9 * sig / np.max(np.abs(sig))
    return Waveform(sig.astype(np.float32), sample_rate)


def generate_toy_corpus(n_speakers: int, utterances_per_speaker: int,
                        utterance_len: int, seed: int,
                        sample_rate: int = 24000) -> list[UtteranceRecord]:
    """Deterministic toy corpus with >= 2 speakers held out as the test split."""
    if n_speakers < 4:
        raise DataError("need n_speakers >= 4 to form a train/test speaker split")
    if utterance_len <= 0 or utterance_len % HOP:
        raise DataError(f"utterance_len must be a positive multiple of {HOP}")
    root = np.random.SeedSequence(seed)
    spk_seeds = root.spawn(n_speakers + 1)
    ladder = np.random.default_rng(spk_seeds[n_speakers]).permutation(n_speakers)
    n_test = max(2, n_speakers // 3)
    records = []
    for i in range(n_speakers):
        spk_rng = np.random.default_rng(spk_seeds[i])
        spec = _make_speaker(i, int(ladder[i]), spk_rng)
        split = "test" if i >= n_speakers - n_test else "train"
        for u in range(utterances_per_speaker):
            w = _synth_utterance(spec, utterance_len, sample_rate, spk_rng)
            records.append(UtteranceRecord(f"{spec.speaker_id}_utt{u:03d}", w, spec.speaker_id, split))
    return records


def crop_or_pad(w: Waveform, target_len: int, training: bool = False,
                rng: np.random.Generator | None = None) -> Waveform:
    """Fix length: random-offset crop in training, offset-0 crop in eval,
    zero padding at the end when short."""
    if target_len <= 0 or target_len % HOP:
        raise DataError(f"target_len must be a positive multiple of {HOP}")
    n = len(w)
    if n == target_len:
        return w
    if n > target_len:
        if training:
            if rng is None:
                rng = np.random.default_rng()
            off = int(rng.integers(0, n - target_len + 1))
        else:
            off = 0
        return Waveform(w.samples[off:off + target_len], w.sample_rate)
    out = np.zeros(target_len, dtype=np.float32)
    out[:n] = w.samples
    return Waveform(out, w.sample_rate)


def select_reference_clip(records: list[UtteranceRecord], speaker_id: str,
                          clip_len: int, seed: int) -> Waveform:
    """Random fixed-length segment from a random utterance of the speaker."""
    if clip_len <= 0 or clip_len % HOP:
        raise DataError(f"clip_len must be a positive multiple of {HOP}")
    candidates = [r for r in records if r.speaker_id == speaker_id and len(r.waveform) >= clip_len]
    if not candidates:
        raise DataError(f"no utterance of speaker {speaker_id!r} is >= {clip_len} samples")
    rng = np.random.default_rng(seed)
    rec = candidates[int(rng.integers(0, len(candidates)))]
    off = int(rng.integers(0, len(rec.waveform) - clip_len + 1))
    return Waveform(rec.waveform.samples[off:off + clip_len], rec.waveform.sample_rate)


def save_corpus(records: list[UtteranceRecord], out_dir: str | Path) -> Path:
    """Write float32 WAVs plus a `path<TAB>speaker_id<TAB>split` manifest."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        rel = f"wav/{r.utterance_id}.wav"
        scipy.io.wavfile.write(out / rel, r.waveform.sample_rate, r.waveform.samples)
        lines.append(f"{rel}\t{r.speaker_id}\t{r.split}")
    manifest = out / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_corpus(manifest_path: str | Path) -> list[UtteranceRecord]:
    manifest = Path(manifest_path)
    root = manifest.parent
    records = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise DataError(f"bad manifest line: {line!r}")
        rel, speaker_id, split = parts
        if split not in ("train", "test"):
            raise DataError(f"bad split {split!r} in manifest")
        sr, samples = scipy.io.wavfile.read(root / rel)
        if samples.dtype == np.int16:
            samples = samples.astype(np.float32) / 32768.0
        records.append(UtteranceRecord(Path(rel).stem, Waveform(samples, int(sr)), speaker_id, split))
    _check_disjoint(records)
    return records


def _check_disjoint(records: list[UtteranceRecord]) -> None:
    train = {r.speaker_id for r in records if r.split == "train"}
    test = {r.speaker_id for r in records if r.split == "test"}
    if train & test:
        raise DataError(f"speakers appear in both splits: {sorted(train & test)}")
