"""Deterministic synthetic two-speaker corpus.

Speakers are parameterized voice profiles (pitch base, jitter, three
resonances, breathiness) fully determined by (speaker_id, master_seed).
Utterances are glottal-pulse-like excitations with a random pitch contour,
filtered through the speaker's resonances and peak-normalized.  Only
utterance WAVs hit disk; mixtures are re-materialized from them so that
mixture == target + interferer holds sample-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import Waveform, read_wav, write_wav
from .util import config_hash, derive_seed, fmt17, rng_for

MANIFEST_VERSION = "1"


@dataclass(frozen=True)
class SpeakerProfile:
    speaker_id: int
    f0_base: float                 # Hz
    f0_jitter: float               # fraction of f0_base
    resonances: tuple[tuple[float, float, float], ...]  # (center Hz, bandwidth Hz, gain)
    breathiness: float             # noise-mix fraction
    seed: int


@dataclass(frozen=True)
class CorpusConfig:
    sample_rate: int = 8000
    train_speakers: int = 32
    train_utterances: int = 12
    test_speakers: int = 8
    test_utterances: int = 8
    min_duration: float = 1.0
    max_duration: float = 2.0
    train_mixtures: int = 400
    test_mixtures: int = 100
    snr_low: float = -3.0
    snr_high: float = 3.0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class MixtureSample:
    """One extraction task: a mixture plus its target-side ground truth."""

    mixture: Waveform
    target: Waveform
    interferer: Waveform          # already scaled; mixture == target + interferer
    enrollment: Waveform
    target_speaker: int
    snr_db: float


@dataclass(frozen=True)
class UtteranceRecord:
    utt_id: str
    speaker: int
    path: str
    duration_ms: int
    split: str


@dataclass(frozen=True)
class MixtureRecord:
    mix_id: str
    utt_a: str
    utt_b: str
    snr_db: float                  # energy ratio of utt_a over scaled utt_b, in dB
    enroll_a: str
    enroll_b: str
    split: str


@dataclass
class CorpusManifest:
    master_seed: int
    corpus_hash: str
    config_hash: str
    speakers: dict[int, str]               # speaker id -> split
    utterances: dict[str, UtteranceRecord]
    mixtures: list[MixtureRecord]

    def split_speakers(self, split: str) -> list[int]:
        return sorted(s for s, sp in self.speakers.items() if sp == split)

    def split_mixtures(self, split: str) -> list[MixtureRecord]:
        return [m for m in self.mixtures if m.split == split]

    def speaker_utterances(self, speaker: int, split: str | None = None) -> list[str]:
        return sorted(u.utt_id for u in self.utterances.values()
                      if u.speaker == speaker and (split is None or u.split == split))


# ---------------------------------------------------------------------------
# speaker and utterance synthesis

def make_speaker(speaker_id: int, master_seed: int) -> SpeakerProfile:
    """Deterministic voice profile; distinct ids draw distinct resonances."""
    seed = derive_seed(master_seed, "speaker", speaker_id)
    rng = np.random.default_rng(seed)
    f0 = float(np.exp(rng.uniform(np.log(80.0), np.log(300.0))))
    jitter = float(rng.uniform(0.05, 0.15))
    bands = [(300.0, 900.0), (1000.0, 2200.0), (2300.0, 3600.0)]
    gains = [(0.7, 1.3), (0.4, 0.9), (0.2, 0.6)]
    res = []
    for (lo, hi), (glo, ghi) in zip(bands, gains):
        center = float(rng.uniform(lo, hi))
        bw = float(rng.uniform(0.03 * center, 0.08 * center))
        res.append((center, bw, float(rng.uniform(glo, ghi))))
    breath = float(rng.uniform(0.02, 0.12))
    return SpeakerProfile(speaker_id, f0, jitter, tuple(res), breath, seed)


def _resonator_coeffs(center: float, bandwidth: float, fs: int):
    r = np.exp(-np.pi * bandwidth / fs)
    theta = 2.0 * np.pi * center / fs
    b = np.array([1.0 - r])
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return b, a


def synth_utterance(profile: SpeakerProfile, utt_seed: int, duration_s: float,
                    sample_rate: int = 8000) -> Waveform:
    """Synthesize one utterance, deterministic per (profile, utt_seed).

    A pulse train follows a smoothed random pitch contour around f0_base,
    is mixed with breathiness noise, runs through the speaker's parallel
    resonators, and is peak-normalized to 0.9.
    """
    if duration_s < 0.5:
        raise ValueError(f"duration {duration_s}s is too short (< 0.5s)")
    rng = np.random.default_rng(derive_seed(profile.seed, "utt", utt_seed))
    n = int(round(duration_s * sample_rate))

    # pitch contour: linear interpolation between control points every 50 ms
    n_ctrl = max(2, n // (sample_rate // 20) + 1)
    ctrl = rng.uniform(-1.0, 1.0, n_ctrl)
    contour = np.interp(np.arange(n), np.linspace(0, n - 1, n_ctrl), ctrl)
    f0 = profile.f0_base * (1.0 + profile.f0_jitter * contour)

    # glottal-pulse-like excitation: decaying pulse at each phase wrap
    phase = np.cumsum(f0 / sample_rate)
    wraps = np.flatnonzero(np.diff(np.floor(phase)) > 0) + 1
    pulse = np.exp(-np.arange(16) / (0.002 * sample_rate))
    exc = np.zeros(n)
    for w in wraps:
        end = min(w + 16, n)
        exc[w:end] += pulse[: end - w]

    noise = rng.standard_normal(n)
    exc = exc / (np.sqrt(np.mean(exc**2)) + 1e-12)
    noise = noise / np.sqrt(np.mean(noise**2))
    source = (1.0 - profile.breathiness) * exc + profile.breathiness * noise

    out = np.zeros(n)
    for center, bw, gain in profile.resonances:
        b, a = _resonator_coeffs(center, bw, sample_rate)
        out += gain * lfilter(b, a, source)

    out *= _syllable_envelope(rng, n, sample_rate)
    out *= 0.9 / np.max(np.abs(out))
    return Waveform(out, sample_rate)


def _syllable_envelope(rng: np.random.Generator, n: int, fs: int) -> np.ndarray:
    """Syllable-like amplitude contour: raised-cosine bumps with soft gaps.

    Speech energy is time-sparse; without this, utterances are continuously
    voiced and mixtures overlap everywhere at once.
    """
    env = np.full(n, 0.1)
    pos = 0
    while pos < n:
        length = int(rng.uniform(0.10, 0.25) * fs)
        bump = 0.1 + 0.9 * np.sin(np.pi * np.arange(length) / length) ** 2
        end = min(pos + length, n)
        env[pos:end] = bump[: end - pos]
        pos = end + int(rng.uniform(0.03, 0.08) * fs)
    return env


# ---------------------------------------------------------------------------
# mixing

def mixture_components(u_target: Waveform, u_interferer: Waveform,
                       snr_db: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Truncate to the shorter signal, scale the interferer to the requested
    target/interferer energy ratio, and sum.  Returns (mixture, target,
    scaled interferer); mixture == target + interferer bit-exactly.
    """
    if u_target.sample_rate != u_interferer.sample_rate:
        raise ValueError("sample rates differ")
    n = min(len(u_target), len(u_interferer))
    t = u_target.samples[:n]
    i = u_interferer.samples[:n]
    e_t = float(np.sum(t * t))
    e_i = float(np.sum(i * i))
    if e_t == 0.0 or e_i == 0.0:
        raise ValueError("zero-energy input")
    gain = np.sqrt(e_t / e_i) * 10.0 ** (-snr_db / 20.0)
    i = i * gain
    mix = t + i
    peak = np.max(np.abs(mix))
    if peak > 0.95:
        s = 0.95 / peak
        t = t * s
        i = i * s
        mix = t + i
    return mix, t, i


def make_mixture(u_target: Waveform, u_interferer: Waveform, snr_db: float,
                 enrollment: Waveform, target_speaker: int) -> MixtureSample:
    mix, t, i = mixture_components(u_target, u_interferer, snr_db)
    rate = u_target.sample_rate
    return MixtureSample(Waveform(mix, rate), Waveform(t, rate), Waveform(i, rate),
                         enrollment, target_speaker, snr_db)


# ---------------------------------------------------------------------------
# corpus build and manifest I/O

def _draw_mixtures(manifest_utts: dict[str, UtteranceRecord], speakers: list[int],
                   count: int, split: str, cfg: CorpusConfig, master_seed: int,
                   ) -> list[MixtureRecord]:
    by_speaker: dict[int, list[str]] = {}
    for u in manifest_utts.values():
        if u.split == split:
            by_speaker.setdefault(u.speaker, []).append(u.utt_id)
    for utts in by_speaker.values():
        utts.sort()
    records = []
    for j in range(count):
        rng = np.random.default_rng(derive_seed(master_seed, "mix", split, j))
        spk_a, spk_b = rng.choice(speakers, size=2, replace=False)
        utt_a = by_speaker[spk_a][rng.integers(len(by_speaker[spk_a]))]
        utt_b = by_speaker[spk_b][rng.integers(len(by_speaker[spk_b]))]
        snr = float(rng.uniform(cfg.snr_low, cfg.snr_high))
        pool_a = [u for u in by_speaker[spk_a] if u != utt_a]
        pool_b = [u for u in by_speaker[spk_b] if u != utt_b]
        enr_a = pool_a[rng.integers(len(pool_a))]
        enr_b = pool_b[rng.integers(len(pool_b))]
        records.append(MixtureRecord(f"m_{split}_{j:04d}", utt_a, utt_b, snr,
                                     enr_a, enr_b, split))
    return records


def build_corpus(cfg: CorpusConfig, master_seed: int, out_dir) -> CorpusManifest:
    """Write utterance WAVs and the manifest; fully reproducible per seed."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)

    splits = ([("train", s, cfg.train_utterances) for s in range(cfg.train_speakers)]
              + [("test", cfg.train_speakers + s, cfg.test_utterances)
                 for s in range(cfg.test_speakers)])
    speakers: dict[int, str] = {}
    utterances: dict[str, UtteranceRecord] = {}
    for split, spk, n_utts in splits:
        speakers[spk] = split
        profile = make_speaker(spk, master_seed)
        for j in range(n_utts):
            rng = np.random.default_rng(derive_seed(master_seed, "dur", spk, j))
            dur = float(rng.uniform(cfg.min_duration, cfg.max_duration))
            w = synth_utterance(profile, j, dur, cfg.sample_rate)
            utt_id = f"u{spk:03d}_{j:02d}"
            rel = f"wavs/{utt_id}.wav"
            write_wav(out_dir / rel, w)
            utterances[utt_id] = UtteranceRecord(
                utt_id, spk, rel, len(w) * 1000 // cfg.sample_rate, split)

    mixtures = _draw_mixtures(utterances, sorted(s for s, sp in speakers.items()
                                                 if sp == "train"),
                              cfg.train_mixtures, "train", cfg, master_seed)
    mixtures += _draw_mixtures(utterances, sorted(s for s, sp in speakers.items()
                                                  if sp == "test"),
                               cfg.test_mixtures, "test", cfg, master_seed)

    chash = config_hash(cfg.to_dict())
    corpus_hash = config_hash({"config": cfg.to_dict(), "master_seed": master_seed})
    manifest = CorpusManifest(master_seed, corpus_hash, chash, speakers,
                              utterances, mixtures)
    save_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def save_manifest(manifest: CorpusManifest, path) -> None:
    lines = [f"manifest v{MANIFEST_VERSION} seed={manifest.master_seed} "
             f"corpus_hash={manifest.corpus_hash} config_hash={manifest.config_hash}"]
    for spk in sorted(manifest.speakers):
        lines.append(f"spk {spk} {manifest.speakers[spk]}")
    for utt_id in sorted(manifest.utterances):
        u = manifest.utterances[utt_id]
        lines.append(f"utt {u.utt_id} {u.speaker} {u.path} {u.duration_ms} {u.split}")
    for m in manifest.mixtures:
        lines.append(f"mix {m.mix_id} {m.utt_a} {m.utt_b} {fmt17(m.snr_db)} "
                     f"{m.enroll_a} {m.enroll_b} {m.split}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> CorpusManifest:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith(f"manifest v{MANIFEST_VERSION} "):
        raise ValueError(f"{path}: not a v{MANIFEST_VERSION} manifest")
    header = dict(f.split("=", 1) for f in lines[0].split()[2:])
    manifest = CorpusManifest(int(header["seed"]), header["corpus_hash"],
                              header["config_hash"], {}, {}, [])
    for line in lines[1:]:
        kind, *f = line.split()
        if kind == "spk":
            manifest.speakers[int(f[0])] = f[1]
        elif kind == "utt":
            manifest.utterances[f[0]] = UtteranceRecord(f[0], int(f[1]), f[2],
                                                        int(f[3]), f[4])
        elif kind == "mix":
            manifest.mixtures.append(MixtureRecord(f[0], f[1], f[2], float(f[3]),
                                                   f[4], f[5], f[6]))
        else:
            raise ValueError(f"{path}: unknown record kind {kind!r}")
    return manifest


class CorpusStore:
    """Loads a built corpus and materializes MixtureSamples on demand.

    Waveforms are cached in memory; each manifest mixture yields two samples
    (side 0 extracts utt_a, side 1 extracts utt_b from the same mixture).
    """

    def __init__(self, root, manifest: CorpusManifest | None = None):
        self.root = Path(root)
        self.manifest = manifest or load_manifest(self.root / "manifest.txt")
        self._cache: dict[str, Waveform] = {}

    def waveform(self, utt_id: str) -> Waveform:
        w = self._cache.get(utt_id)
        if w is None:
            w = read_wav(self.root / self.manifest.utterances[utt_id].path)
            self._cache[utt_id] = w
        return w

    def sample(self, record: MixtureRecord, side: int,
               enrollment_utt: str | None = None) -> MixtureSample:
        if side not in (0, 1):
            raise ValueError("side must be 0 or 1")
        wa = self.waveform(record.utt_a)
        wb = self.waveform(record.utt_b)
        mix, a_part, b_part = mixture_components(wa, wb, record.snr_db)
        rate = wa.sample_rate
        if side == 0:
            target, interferer = a_part, b_part
            speaker = self.manifest.utterances[record.utt_a].speaker
            enroll_id = enrollment_utt or record.enroll_a
            snr = record.snr_db
        else:
            target, interferer = b_part, a_part
            speaker = self.manifest.utterances[record.utt_b].speaker
            enroll_id = enrollment_utt or record.enroll_b
            snr = -record.snr_db
        in_mix = {record.utt_a, record.utt_b}
        if enroll_id in in_mix:
            raise ValueError(f"enrollment {enroll_id} is inside the mixture")
        if self.manifest.utterances[enroll_id].speaker != speaker:
            raise ValueError(f"enrollment {enroll_id} is not speaker {speaker}")
        return MixtureSample(Waveform(mix, rate), Waveform(target, rate),
                             Waveform(interferer, rate), self.waveform(enroll_id),
                             speaker, snr)

    def enrollment_pool(self, record: MixtureRecord, side: int) -> list[str]:
        speaker = self.manifest.utterances[
            record.utt_a if side == 0 else record.utt_b].speaker
        used = {record.utt_a, record.utt_b}
        return [u for u in self.manifest.speaker_utterances(speaker)
                if u not in used]
