"""Waveform I/O, STFT/iSTFT, and frequency-band grouping.

The STFT analyzes 1 + floor((len - window) / hop) full windows (no center
padding); iSTFT is weighted overlap-add normalized by the summed squared
window, zero-padded back to the original sample count at the tail.  Both
transforms are linear maps and are registered as differentiable tape ops
with exact adjoints.
"""

from __future__ import annotations

import functools
import wave
from dataclasses import dataclass, field

import numpy as np

from . import diffgraph as dg

DEFAULT_SAMPLE_RATE = 8000


class WavFormatError(Exception):
    """Malformed or unsupported WAV content."""


@functools.lru_cache(maxsize=None)
def periodic_hann(n: int) -> np.ndarray:
    k = np.arange(n)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * k / n)
    w.flags.writeable = False
    return w


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 256
    hop: int = 128

    def __post_init__(self):
        if self.window_length <= 0 or self.hop <= 0:
            raise ValueError("window_length and hop must be positive")
        if self.window_length % self.hop != 0:
            raise ValueError("hop must divide window_length evenly")
        if self.hop >= self.window_length:
            raise ValueError("hop must be smaller than window_length (overlap-add)")

    @property
    def bins(self) -> int:
        return self.window_length // 2 + 1

    @property
    def window(self) -> np.ndarray:
        return periodic_hann(self.window_length)

    def frame_count(self, n_samples: int) -> int:
        if n_samples < self.window_length:
            raise ValueError(
                f"signal of {n_samples} samples is shorter than one window "
                f"({self.window_length})")
        return 1 + (n_samples - self.window_length) // self.hop


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-d array")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    data: np.ndarray            # (frames, bins) complex128
    config: StftConfig
    n_samples: int
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.ndim != 2:
            raise ValueError("spectrogram data must be 2-d (frames, bins)")
        if self.data.shape[1] != self.config.bins:
            raise ValueError(
                f"bin count {self.data.shape[1]} != window_length/2+1 "
                f"({self.config.bins})")
        if not np.all(np.isfinite(self.data.real)) or not np.all(np.isfinite(self.data.imag)):
            raise ValueError("spectrogram contains non-finite entries")


# ---------------------------------------------------------------------------
# WAV I/O: RIFF PCM 16-bit mono

_PCM_SCALE = 32767.0


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * _PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            if f.getnchannels() != 1:
                raise WavFormatError(
                    f"{path}: expected mono, got {f.getnchannels()} channels")
            if f.getsampwidth() != 2 or f.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: only 16-bit PCM is supported")
            rate = f.getframerate()
            raw = f.readframes(f.getnframes())
    except (wave.Error, EOFError) as e:
        raise WavFormatError(f"{path}: malformed WAV header ({e})") from e
    pcm = np.frombuffer(raw, dtype="<i2")
    if pcm.size == 0:
        raise WavFormatError(f"{path}: no audio frames")
    return Waveform(pcm.astype(np.float64) / _PCM_SCALE, rate)


# ---------------------------------------------------------------------------
# STFT / iSTFT kernels (batched; planes layout (B, 2, frames, bins))

def _frame_offsets(cfg: StftConfig, n_samples: int) -> np.ndarray:
    frames = cfg.frame_count(n_samples)
    return np.arange(frames) * cfg.hop


def stft_kernel(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """(B, N) real samples -> (B, 2, frames, bins) real/imag planes."""
    if x.ndim != 2:
        raise dg.GraphError(f"stft expects (batch, samples), got {x.shape}")
    offs = _frame_offsets(cfg, x.shape[1])
    idx = offs[:, None] + np.arange(cfg.window_length)[None, :]
    segs = x[:, idx] * cfg.window
    spec = np.fft.rfft(segs, axis=-1)
    return np.stack([spec.real, spec.imag], axis=1)


def stft_adjoint_kernel(g: np.ndarray, cfg: StftConfig, n_samples: int) -> np.ndarray:
    """Exact adjoint of stft_kernel: (B, 2, T, bins) -> (B, N)."""
    n = cfg.window_length
    G = g[:, 0].astype(np.complex128)
    G += 1j * g[:, 1]
    # real-parameterized rfft adjoint: halve interior bins, drop edge imag
    G[..., 1:-1] *= 0.5
    G[..., 0] = G[..., 0].real
    G[..., -1] = G[..., -1].real
    segs = n * np.fft.irfft(G, n=n, axis=-1)
    segs *= cfg.window
    offs = _frame_offsets(cfg, n_samples)
    out = np.zeros((g.shape[0], n_samples))
    for t, o in enumerate(offs):
        out[:, o:o + n] += segs[:, t]
    return out


@functools.lru_cache(maxsize=None)
def _ola_norm(window_length: int, hop: int, frames: int) -> np.ndarray:
    win = periodic_hann(window_length)
    n = window_length + (frames - 1) * hop
    den = np.zeros(n)
    for t in range(frames):
        den[t * hop: t * hop + window_length] += win * win
    # Floor at 1% of the plateau: where the analysis window vanishes the
    # samples are unrecoverable anyway, and dividing a masked frame's
    # leakage by ~0 would inject large edge spikes into every estimate.
    den = np.maximum(den, 0.01 * den.max())
    den.flags.writeable = False
    return den


def istft_kernel(planes: np.ndarray, cfg: StftConfig, n_samples: int) -> np.ndarray:
    """(B, 2, frames, bins) -> (B, n_samples) via normalized overlap-add."""
    if planes.ndim != 4 or planes.shape[1] != 2 or planes.shape[3] != cfg.bins:
        raise dg.GraphError(f"istft: inconsistent planes shape {planes.shape}")
    frames = planes.shape[2]
    spec = planes[:, 0] + 1j * planes[:, 1]
    segs = np.fft.irfft(spec, n=cfg.window_length, axis=-1)
    segs *= cfg.window
    n_cov = cfg.window_length + (frames - 1) * cfg.hop
    if n_cov > n_samples:
        raise dg.GraphError(
            f"istft: {frames} frames cover {n_cov} samples > target {n_samples}")
    out = np.zeros((planes.shape[0], n_samples))
    for t in range(frames):
        o = t * cfg.hop
        out[:, o:o + cfg.window_length] += segs[:, t]
    out[:, :n_cov] /= _ola_norm(cfg.window_length, cfg.hop, frames)
    return out


def istft_adjoint_kernel(g: np.ndarray, cfg: StftConfig, frames: int) -> np.ndarray:
    """Exact adjoint of istft_kernel: (B, N) -> (B, 2, frames, bins)."""
    n = cfg.window_length
    n_cov = n + (frames - 1) * cfg.hop
    gn = g[:, :n_cov] / _ola_norm(n, cfg.hop, frames)
    offs = np.arange(frames) * cfg.hop
    idx = offs[:, None] + np.arange(n)[None, :]
    gseg = gn[:, idx] * cfg.window
    F = np.fft.rfft(gseg, axis=-1)
    re = (2.0 / n) * F.real
    im = (2.0 / n) * F.imag
    re[..., 0] *= 0.5
    re[..., -1] *= 0.5
    im[..., 0] = 0.0
    im[..., -1] = 0.0
    return np.stack([re, im], axis=1)


dg.register_op(
    "stft",
    lambda attrs, x: stft_kernel(x, attrs),
    lambda attrs, out, v, g: (stft_adjoint_kernel(g, attrs, v[0].shape[1]),))

dg.register_op(
    "istft",
    lambda attrs, p: istft_kernel(p, attrs[0], attrs[1]),
    lambda attrs, out, v, g: (istft_adjoint_kernel(g, attrs[0], v[0].shape[2]),))


def stft_node(x: dg.Node, cfg: StftConfig) -> dg.Node:
    """Differentiable STFT of a (batch, samples) node."""
    return dg._apply("stft", (x,), cfg)


def istft_node(planes: dg.Node, cfg: StftConfig, n_samples: int) -> dg.Node:
    """Differentiable iSTFT of a (batch, 2, frames, bins) node."""
    return dg._apply("istft", (planes,), (cfg, int(n_samples)))


# ---------------------------------------------------------------------------
# waveform-level transforms

def stft(w: Waveform, cfg: StftConfig) -> Spectrogram:
    planes = stft_kernel(w.samples[None, :], cfg)
    return Spectrogram(planes[0, 0] + 1j * planes[0, 1], cfg, len(w), w.sample_rate)


def istft(s: Spectrogram) -> Waveform:
    planes = np.stack([s.data.real, s.data.imag])[None, ...]
    out = istft_kernel(planes, s.config, s.n_samples)
    return Waveform(out[0], s.sample_rate)


# ---------------------------------------------------------------------------
# band plans

@dataclass(frozen=True)
class BandPlan:
    """Ordered, disjoint, exhaustive bin ranges over [0, bins)."""

    ranges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        prev = 0
        for start, stop in self.ranges:
            if start != prev or stop <= start:
                raise ValueError(f"band ranges must tile [0, bins): {self.ranges}")
            prev = stop

    @property
    def bins(self) -> int:
        return self.ranges[-1][1]

    def __len__(self):
        return len(self.ranges)

    def widths(self) -> list[int]:
        return [stop - start for start, stop in self.ranges]


def default_band_plan(bins: int = 129) -> BandPlan:
    """4 low bands of 16 bins, then 4 bands splitting the remainder evenly."""
    edges = [0, 16, 32, 48, 64]
    if bins <= edges[-1] + 4:
        raise ValueError(f"default plan needs more than {edges[-1] + 4} bins")
    rest = bins - edges[-1]
    step = rest // 4
    for i in range(1, 4):
        edges.append(edges[4] + i * step)
    edges.append(bins)
    return BandPlan(tuple((edges[i], edges[i + 1]) for i in range(8)))


def band_split(spec: np.ndarray, plan: BandPlan) -> list[np.ndarray]:
    """Split the last (bin) axis into per-band arrays."""
    if spec.shape[-1] != plan.bins:
        raise ValueError(
            f"plan covers {plan.bins} bins but spectrogram has {spec.shape[-1]}")
    return [spec[..., start:stop] for start, stop in plan.ranges]


def band_merge(bands: list[np.ndarray], plan: BandPlan) -> np.ndarray:
    if len(bands) != len(plan):
        raise ValueError(f"expected {len(plan)} bands, got {len(bands)}")
    for b, (start, stop) in zip(bands, plan.ranges):
        if b.shape[-1] != stop - start:
            raise ValueError("band widths do not match the plan")
    return np.concatenate(bands, axis=-1)


def log_magnitude(planes: np.ndarray) -> np.ndarray:
    """0.5*log(re^2 + im^2 + 1e-10) over (..., 2, T, bins) planes."""
    re = planes[..., 0, :, :]
    im = planes[..., 1, :, :]
    return 0.5 * np.log(re * re + im * im + 1e-10)
