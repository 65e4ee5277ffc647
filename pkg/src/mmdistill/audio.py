"""Multi-microphone waveform handling and the Mel-spectrogram front end."""

from __future__ import annotations

import json
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import Tensor, as_array

NS_PER_S = 1_000_000_000


@dataclass(frozen=True)
class WaveClip:
    channels: np.ndarray  # (n_mics, n_samples)
    sample_rate: int = 44100
    timestamp: int = 0  # ns of sample 0

    def __post_init__(self):
        ch = np.asarray(self.channels, dtype=np.float64)
        if ch.ndim != 2:
            raise ValueError("channels must be (n_mics, n_samples)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "channels", ch)

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 1024
    hop: int = 256
    center: bool = True
    mel_bins: int = 80
    fmin: float = 0.0
    fmax: float | None = None  # defaults to Nyquist
    sample_rate: int = 44100

    def __post_init__(self):
        if self.hop > self.window_length or self.hop <= 0:
            raise ValueError("need 0 < hop <= window_length")
        if self.mel_bins < 1:
            raise ValueError("mel_bins must be >= 1")

    @property
    def f_high(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else self.fmax


@dataclass(frozen=True)
class Spectrogram:
    values: Tensor  # mel_bins × frames
    channel_index: int = 0


# -- waveform ---------------------------------------------------------------


def extract_clip(recording: WaveClip, center_ts: int, duration_s: float = 1.0) -> WaveClip:
    """Cut ``duration_s`` seconds centred on ``center_ts`` (ns), zero-padding outside."""
    if recording.n_samples == 0:
        raise ValueError("empty recording")
    sr = recording.sample_rate
    n = int(round(duration_s * sr))
    center = int(round((center_ts - recording.timestamp) * sr / NS_PER_S))
    start = center - n // 2
    out = np.zeros((recording.channels.shape[0], n))
    lo, hi = max(start, 0), min(start + n, recording.n_samples)
    if hi > lo:
        out[:, lo - start : hi - start] = recording.channels[:, lo:hi]
    ts = recording.timestamp + int(round(start * NS_PER_S / sr))
    return WaveClip(out, sr, ts)


def peak_normalize(clip: WaveClip) -> WaveClip:
    """Scale all channels by one common factor so the loudest sample is ±1."""
    peak = float(np.max(np.abs(clip.channels))) if clip.channels.size else 0.0
    if peak == 0.0:
        return clip
    return WaveClip(clip.channels / peak, clip.sample_rate, clip.timestamp)


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2 or w.getnchannels() != 1:
            raise ValueError(f"{path}: only 16-bit mono PCM is supported")
        sr = w.getframerate()
        raw = w.readframes(w.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0, sr


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def load_recording(paths: Sequence[str | Path], timestamp: int = 0) -> WaveClip:
    chans, rates = zip(*(read_wav(p) for p in paths))
    if len(set(rates)) != 1:
        raise ValueError(f"microphones disagree on sample rate: {rates}")
    if len({len(c) for c in chans}) != 1:
        raise ValueError("microphone files differ in length")
    return WaveClip(np.stack(chans), rates[0], timestamp)


def read_manifest(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- spectrogram ------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_points(cfg: StftConfig) -> np.ndarray:
    """mel_bins + 2 equally spaced Mel edges; filter k peaks at edge k + 1."""
    return np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.f_high), cfg.mel_bins + 2)


def mel_center_frequencies(cfg: StftConfig) -> np.ndarray:
    return mel_to_hz(mel_points(cfg)[1:-1])


@lru_cache(maxsize=8)
def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    """Triangular filters, (mel_bins, window_length // 2 + 1), peak weight 1."""
    hz = mel_to_hz(mel_points(cfg))
    freqs = np.fft.rfftfreq(cfg.window_length, 1.0 / cfg.sample_rate)
    lo, mid, hi = hz[:-2, None], hz[1:-1, None], hz[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.clip(np.minimum(up, down), 0.0, None)
    fb.flags.writeable = False
    return fb


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    if cfg.center:
        return 1 + n_samples // cfg.hop
    return 1 + (n_samples - cfg.window_length) // cfg.hop


def power_stft(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """|STFT|^2 as (window_length // 2 + 1, frames) with a periodic Hann window."""
    x = np.asarray(samples, dtype=np.float64)
    if cfg.center:
        half = cfg.window_length // 2
        x = np.pad(x, half, mode="reflect" if x.size > half else "constant")
    if x.size < cfg.window_length:
        raise ValueError(f"{x.size} samples is shorter than one window")
    n_frames = 1 + (x.size - cfg.window_length) // cfg.hop
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(n_frames, cfg.window_length), strides=(x.strides[0] * cfg.hop, x.strides[0]), writeable=False
    )
    window = np.hanning(cfg.window_length + 1)[:-1]
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


def mel_spectrogram(samples, cfg: StftConfig = StftConfig(), channel_index: int = 0) -> Spectrogram:
    """Power Mel spectrogram (no compression, no normalization)."""
    power = power_stft(as_array(samples), cfg)
    return Spectrogram(Tensor(mel_filterbank(cfg) @ power), channel_index)


def log_compress(spec: Spectrogram) -> Spectrogram:
    return Spectrogram(Tensor(np.log1p(spec.values.data)), spec.channel_index)


def bilinear_resize(arr: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Separable bilinear resize with half-pixel centres and edge clamping."""
    arr = np.asarray(arr, dtype=np.float64)
    rows = _interp_matrix(arr.shape[0], out_hw[0])
    cols = _interp_matrix(arr.shape[1], out_hw[1])
    return rows @ arr @ cols.T


@lru_cache(maxsize=32)
def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    m.flags.writeable = False
    return m


def normalize_and_resize(
    spec: Spectrogram, target_hw: tuple[int, int], value_range: tuple[float, float] | None = None
) -> Spectrogram:
    """Min-max to [0, 1] then bilinear resize.

    ``value_range`` overrides the spectrogram's own (min, max); pass the range
    of a whole microphone stack to keep inter-channel level differences.
    A zero range maps to all zeros.
    """
    if target_hw[0] <= 0 or target_hw[1] <= 0:
        raise ValueError("target size must be positive")
    arr = spec.values.data
    lo, hi = (float(arr.min()), float(arr.max())) if value_range is None else value_range
    norm = np.zeros_like(arr) if hi <= lo else np.clip((arr - lo) / (hi - lo), 0.0, 1.0)
    if norm.shape != tuple(target_hw):
        norm = np.clip(bilinear_resize(norm, target_hw), 0.0, 1.0)
    return Spectrogram(Tensor(norm), spec.channel_index)


def stack_channels(specs: Sequence[Spectrogram]) -> Tensor:
    if not specs:
        raise ValueError("no spectrograms to stack")
    shape = specs[0].values.shape
    for s in specs:
        if s.values.shape != shape:
            raise ValueError(f"shape mismatch {s.values.shape} vs {shape}")
    ordered = sorted(specs, key=lambda s: s.channel_index)
    return Tensor(np.stack([s.values.data for s in ordered]))


def mic_subset(n_mics: int, total: int = 8) -> list[int]:
    """Evenly spread microphone indices, always keeping the outermost pair."""
    if n_mics < 1 or n_mics > total:
        raise ValueError(f"cannot pick {n_mics} of {total} microphones")
    if n_mics == 1:
        return [0]
    return sorted({int(round(v)) for v in np.linspace(0, total - 1, n_mics)})


def clip_to_input(
    clip: WaveClip, cfg: StftConfig, target_hw: tuple[int, int], mics: Sequence[int] | None = None
) -> Tensor:
    """Full front end: peak normalize, Mel power, log1p, joint min-max, resize, stack."""
    if clip.sample_rate != cfg.sample_rate:
        raise ValueError(f"clip rate {clip.sample_rate} != configured {cfg.sample_rate}")
    clip = peak_normalize(clip)
    idx = list(range(clip.channels.shape[0])) if mics is None else list(mics)
    specs = [log_compress(mel_spectrogram(clip.channels[i], cfg, i)) for i in idx]
    lo = min(float(s.values.data.min()) for s in specs)
    hi = max(float(s.values.data.max()) for s in specs)
    return stack_channels([normalize_and_resize(s, target_hw, (lo, hi)) for s in specs])
