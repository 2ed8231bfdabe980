"""WAV reading/writing (RIFF, 32-bit IEEE float, little-endian)."""

from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from claritysim.errors import NotFoundError, SchemaError


def write_wav(path, data: np.ndarray, sample_rate: int) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, int(sample_rate), np.asarray(data, dtype=np.float32))
    return path


def read_wav(path, expect_rate: int | None = None, expect_channels: int | None = None):
    """Return ``(samples as float64, sample_rate)``; multichannel is (n, C)."""
    path = Path(path)
    if not path.exists():
        raise NotFoundError(f"missing audio file {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except ValueError as exc:
        raise SchemaError(f"{path.name}: not a readable WAV file ({exc})") from exc
    if data.dtype != np.float32:
        raise SchemaError(f"{path.name}: expected 32-bit float samples, got {data.dtype}")
    if expect_rate is not None and rate != expect_rate:
        raise SchemaError(f"{path.name}: sample rate {rate}, expected {expect_rate}")
    channels = 1 if data.ndim == 1 else data.shape[1]
    if expect_channels is not None and channels != expect_channels:
        raise SchemaError(f"{path.name}: {channels} channels, expected {expect_channels}")
    if not np.all(np.isfinite(data)):
        raise SchemaError(f"{path.name}: non-finite samples")
    return data.astype(np.float64), rate
