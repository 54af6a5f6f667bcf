"""WAV loading, mono mixdown, and resampling to the encoder's 16 kHz rate."""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

TARGET_SAMPLE_RATE = 16000

_PCM_SCALE = {1: 2**7, 2: 2**15, 4: 2**31}
_PCM_DTYPE = {1: np.uint8, 2: np.dtype("<i2"), 4: np.dtype("<i4")}


class AudioError(ValueError):
    """Audio is unreadable or empty."""


def load_wav(path) -> tuple[np.ndarray, int]:
    """Read a PCM WAV file as float32 samples in [-1, 1] plus its sample rate."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as fh:
            rate = fh.getframerate()
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            frames = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as exc:
        raise AudioError(f"{path}: {exc}") from exc
    if width not in _PCM_DTYPE:
        raise AudioError(f"{path}: unsupported sample width {width} bytes")
    samples = np.frombuffer(frames, dtype=_PCM_DTYPE[width]).astype(np.float64)
    if width == 1:
        samples -= _PCM_SCALE[1]  # 8-bit WAV is unsigned
    samples /= _PCM_SCALE[width]
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    if samples.size == 0:
        raise AudioError(f"{path}: empty audio")
    return samples.astype(np.float32), rate


def to_target_rate(samples: np.ndarray, rate: int) -> np.ndarray:
    """Resample to 16 kHz mono; identity when already at the target rate."""
    if rate == TARGET_SAMPLE_RATE:
        return samples
    if rate <= 0:
        raise AudioError(f"invalid sample rate {rate}")
    gcd = np.gcd(TARGET_SAMPLE_RATE, rate)
    out = resample_poly(samples, TARGET_SAMPLE_RATE // gcd, rate // gcd)
    if out.size == 0:
        raise AudioError(f"audio too short to resample from {rate} Hz")
    return out.astype(np.float32)


def normalize(samples: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance normalization, as the encoders expect."""
    mean = samples.mean()
    var = samples.var()
    return ((samples - mean) / np.sqrt(var + 1e-7)).astype(np.float32)
