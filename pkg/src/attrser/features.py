"""Log mel filterbank extraction, SpecAugment masking and length fixing."""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

from .errors import DataError, FeatureError

TARGET_SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = TARGET_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)

    @property
    def num_samples(self) -> int:
        return int(self.samples.shape[0])

    @property
    def duration(self) -> float:
        return self.num_samples / self.sample_rate


@dataclass
class FBankFeatures:
    """``values`` has shape (num_frames, num_mel_bins)."""

    values: np.ndarray
    frame_shift_ms: float = 10.0
    frame_length_ms: float = 25.0

    @property
    def num_frames(self) -> int:
        return int(self.values.shape[0])

    @property
    def num_mel_bins(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class AugmentSpec:
    freq_mask_width: int = 2
    time_mask_width: int = 30
    num_freq_masks: int = 1
    num_time_masks: int = 1

    def __post_init__(self):
        for name in ("freq_mask_width", "time_mask_width", "num_freq_masks", "num_time_masks"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def normalize_waveform(wav: Waveform) -> Waveform:
    """Peak-normalize into [-1, 1]. Silent input is returned unchanged."""
    peak = np.max(np.abs(wav.samples)) if wav.num_samples else 0.0
    if peak == 0.0:
        return Waveform(wav.samples.copy(), wav.sample_rate)
    return Waveform(wav.samples / peak, wav.sample_rate)


def resample(wav: Waveform, target_rate: int = TARGET_SAMPLE_RATE) -> Waveform:
    if wav.sample_rate == target_rate:
        return wav
    g = math.gcd(wav.sample_rate, target_rate)
    out = resample_poly(wav.samples, target_rate // g, wav.sample_rate // g)
    return Waveform(out, target_rate)


def read_wav(path: str | Path) -> Waveform:
    """Read 16-bit linear PCM; multi-channel audio is averaged to mono."""
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getsampwidth() != 2:
                raise DataError(f"{path}: only 16-bit PCM is supported")
            channels = fh.getnchannels()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: unreadable wav ({exc})") from exc
    except FileNotFoundError as exc:
        raise DataError(f"{path}: no such audio file") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if channels > 1:
        pcm = pcm.reshape(-1, channels).mean(axis=1)
    return Waveform(pcm, rate)


def write_wav(path: str | Path, wav: Waveform) -> None:
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(wav.sample_rate)
        fh.writeframes(pcm.tobytes())


def load_waveform(path: str | Path, target_rate: int = TARGET_SAMPLE_RATE) -> Waveform:
    """Ingestion path: read, resample to the target rate, peak-normalize."""
    return normalize_waveform(resample(read_wav(path), target_rate))


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(num_mel_bins: int, fft_size: int, sample_rate: int) -> np.ndarray:
    """Triangular filters on the HTK mel scale from 0 Hz to Nyquist.

    Returns a (num_mel_bins, fft_size // 2 + 1) weight matrix.
    """
    nyquist = sample_rate / 2.0
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(nyquist), num_mel_bins + 2))
    freqs = np.arange(fft_size // 2 + 1) * sample_rate / fft_size
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_center_frequencies(num_mel_bins: int, sample_rate: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), num_mel_bins + 2))
    return edges[1:-1]


def frame_count(num_samples: int, frame_length: int, frame_shift: int) -> int:
    if num_samples < frame_length:
        return 0
    return (num_samples - frame_length) // frame_shift + 1


def compute_fbanks(
    waveform: Waveform,
    num_mel_bins: int = 80,
    fft_size: int = 1024,
    frame_length_ms: float = 25.0,
    frame_shift_ms: float = 10.0,
) -> FBankFeatures:
    """Hamming-windowed power spectrum -> mel filterbank -> natural log.

    A floor of 1e-10 is added before the log so silent frames stay finite.
    """
    samples = waveform.samples
    if samples.size == 0:
        raise FeatureError("utterance_too_short", "empty waveform")
    if not np.all(np.isfinite(samples)):
        raise FeatureError("invalid_waveform", "waveform contains non-finite samples")
    win = int(round(waveform.sample_rate * frame_length_ms / 1000.0))
    hop = int(round(waveform.sample_rate * frame_shift_ms / 1000.0))
    if samples.size < win:
        raise FeatureError(
            "utterance_too_short", f"{samples.size} samples < one {win}-sample frame"
        )
    if fft_size < win:
        raise ValueError(f"fft_size {fft_size} shorter than the {win}-sample frame")

    n = frame_count(samples.size, win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n]
    spectrum = np.fft.rfft(frames * np.hamming(win), n=fft_size, axis=1)
    power = spectrum.real**2 + spectrum.imag**2
    energies = power @ mel_filterbank(num_mel_bins, fft_size, waveform.sample_rate).T
    return FBankFeatures(np.log(energies + LOG_FLOOR), frame_shift_ms, frame_length_ms)


def spec_augment(
    fbanks: FBankFeatures, spec: AugmentSpec, rng: np.random.Generator
) -> FBankFeatures:
    """Zero random frequency bands and time spans; widths drawn from [0, max]."""
    out = fbanks.values.copy()
    frames, bins = out.shape
    for _ in range(spec.num_freq_masks):
        width = min(int(rng.integers(0, spec.freq_mask_width + 1)), bins)
        start = int(rng.integers(0, bins - width + 1))
        out[:, start : start + width] = 0.0
    for _ in range(spec.num_time_masks):
        width = min(int(rng.integers(0, spec.time_mask_width + 1)), frames)
        start = int(rng.integers(0, frames - width + 1))
        out[start : start + width, :] = 0.0
    return replace(fbanks, values=out)


def fix_length(
    fbanks: FBankFeatures,
    target_frames: int,
    mode: str = "train",
    rng: np.random.Generator | None = None,
) -> FBankFeatures:
    """Random-crop or end-pad to ``target_frames`` in train mode; identity in eval."""
    if mode == "eval":
        return fbanks
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    if target_frames <= 0:
        raise ValueError("target_frames must be positive in train mode")
    values = fbanks.values
    n = values.shape[0]
    if n > target_frames:
        rng = rng if rng is not None else np.random.default_rng()
        start = int(rng.integers(0, n - target_frames + 1))
        values = values[start : start + target_frames]
    elif n < target_frames:
        pad = np.zeros((target_frames - n, values.shape[1]), dtype=values.dtype)
        values = np.concatenate([values, pad], axis=0)
    return replace(fbanks, values=values.copy())


def write_fbank_file(path: str | Path, fbanks: FBankFeatures) -> None:
    """Header: two little-endian uint32 (num_frames, num_mel_bins); then float32 LE."""
    values = np.ascontiguousarray(fbanks.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", *values.shape))
        fh.write(values.tobytes())


def read_fbank_file(path: str | Path) -> FBankFeatures:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DataError(f"{path}: truncated feature header")
    frames, bins = struct.unpack("<II", data[:8])
    if len(data) != 8 + 4 * frames * bins:
        raise DataError(f"{path}: payload size does not match header {frames}x{bins}")
    values = np.frombuffer(data, dtype="<f4", offset=8).reshape(frames, bins)
    return FBankFeatures(values.astype(np.float32))
