"""Mono 16 kHz 16-bit PCM WAV reading and writing (stdlib ``wave``)."""

from __future__ import annotations

import os
import tempfile
import wave
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from .features import SAMPLE_RATE

PathLike = Union[str, Path]


class WavFormatError(ValueError):
    pass


def read_wav(path: PathLike, expected_rate: Optional[int] = SAMPLE_RATE) -> Tuple[np.ndarray, int]:
    """Return (samples in [-1, 1), sample_rate). Only mono 16-bit PCM is accepted."""
    try:
        with wave.open(str(path), "rb") as w:
            channels, width, rate = w.getnchannels(), w.getsampwidth(), w.getframerate()
            if w.getcomptype() != "NONE":
                raise WavFormatError(f"{path}: compressed WAV ({w.getcomptype()}) not supported")
            raw = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: not a readable RIFF/WAV file ({exc})") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono audio, got {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit samples")
    if expected_rate is not None and rate != expected_rate:
        raise WavFormatError(f"{path}: expected {expected_rate} Hz, got {rate} Hz (resampling is not supported)")
    pcm = np.frombuffer(raw, dtype="<i2")
    return pcm.astype(np.float64) / 32768.0, rate


def write_wav(path: PathLike, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1) as 16-bit PCM, atomically."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix=".wav", dir=path.parent)
    os.close(fd)
    try:
        with wave.open(tmp, "wb") as w:
            w.setnchannels(1)
            w.setsampwidth(2)
            w.setframerate(rate)
            w.writeframes(pcm.tobytes())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
