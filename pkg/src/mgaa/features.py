"""Cepstral time-frequency front end: LFCC, MFCC and CQCC with deltas.

Every kind goes through the same chain::

    |T{x}|^2 -> filterbank H -> log(. + eps) -> DCT-II (20 coeffs) -> [X, dX, d2X]

and yields a ``(1, 60, 126)`` tensor for a 4 s, 16 kHz segment.
"""

from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

SAMPLE_RATE = 16000
SEGMENT_SAMPLES = 64000
HOP = 512
N_CEPSTRA = 20
DELTA_WINDOW = 4
N_FRAMES = SEGMENT_SAMPLES // HOP + 1  # 126


class FeatureError(ValueError):
    """Bad input to the feature front end."""


class FeatureKind(enum.IntEnum):
    LFCC = 0
    CQCC = 1
    MFCC = 2

    @classmethod
    def parse(cls, value) -> "FeatureKind":
        if isinstance(value, cls):
            return value
        if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
            try:
                return cls(int(value))
            except ValueError:
                pass
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise FeatureError(f"unknown feature kind {value!r}; expected lfcc, cqcc or mfcc") from None


@dataclass(frozen=True)
class AudioSegment:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise FeatureError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1:
            raise FeatureError(f"expected mono samples, got shape {s.shape}")
        if s.shape[0] != SEGMENT_SAMPLES:
            raise FeatureError(f"segment must have {SEGMENT_SAMPLES} samples, got {s.shape[0]}")
        if not np.all(np.isfinite(s)):
            raise FeatureError("segment contains non-finite samples")
        object.__setattr__(self, "samples", s)

    @classmethod
    def from_samples(cls, samples, sample_rate: int = SAMPLE_RATE) -> "AudioSegment":
        """Condition arbitrary-length audio to 4 s: cyclic repeat if short, head if long."""
        s = np.asarray(samples, dtype=np.float64).ravel()
        if s.size == 0:
            raise FeatureError("cannot build a segment from empty audio")
        if s.size < SEGMENT_SAMPLES:
            s = np.tile(s, -(-SEGMENT_SAMPLES // s.size))
        return cls(s[:SEGMENT_SAMPLES], sample_rate)


@dataclass(frozen=True)
class SpectralConfig:
    transform: str = "stft"  # "stft" | "cqt"
    freq_scale: str = "linear"  # "linear" | "log_scale" | "mel"
    hop: int = HOP
    window_length: int = 1024
    n_filters: int = 20
    n_cepstra: int = N_CEPSTRA
    f_min: float = 0.0
    f_max: float = SAMPLE_RATE / 2
    cqt_f_min: float = 32.7
    cqt_bins_per_octave: int = 12
    epsilon: float = 1e-10

    def __post_init__(self):
        if self.hop != HOP:
            raise FeatureError(f"hop must be {HOP}")
        if self.epsilon <= 0:
            raise FeatureError("epsilon must be positive")
        if self.n_filters < self.n_cepstra:
            raise FeatureError(f"n_filters ({self.n_filters}) must be >= n_cepstra ({self.n_cepstra})")
        if self.transform not in ("stft", "cqt"):
            raise FeatureError(f"unknown transform {self.transform!r}")
        if self.freq_scale not in ("linear", "log_scale", "mel"):
            raise FeatureError(f"unknown frequency scale {self.freq_scale!r}")

    @property
    def n_bins(self) -> int:
        if self.transform == "stft":
            return self.window_length // 2 + 1
        return len(cqt_frequencies(self.cqt_f_min, self.cqt_bins_per_octave))


def config_for(kind) -> SpectralConfig:
    kind = FeatureKind.parse(kind)
    if kind is FeatureKind.LFCC:
        return SpectralConfig("stft", "linear")
    if kind is FeatureKind.MFCC:
        return SpectralConfig("stft", "mel")
    return SpectralConfig("cqt", "log_scale", f_min=32.7)


# ---------------------------------------------------------------------------
# spectral decomposition


def _check_segment(samples) -> np.ndarray:
    if isinstance(samples, AudioSegment):
        return samples.samples
    s = np.asarray(samples, dtype=np.float64)
    if s.shape != (SEGMENT_SAMPLES,):
        raise FeatureError(f"segment must have shape ({SEGMENT_SAMPLES},), got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise FeatureError("segment contains non-finite samples")
    return s


def stft_power(samples, window_length: int = 1024, hop: int = HOP) -> np.ndarray:
    """Centered, reflect-padded, periodic-Hann STFT power: (window_length//2+1, T)."""
    x = np.pad(samples, window_length // 2, mode="reflect")
    n_frames = 1 + (x.size - window_length) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window_length)[::hop][:n_frames]
    window = np.hanning(window_length + 1)[:-1]
    spec = np.fft.rfft(frames * window, axis=1)
    return (spec.real**2 + spec.imag**2).T


def cqt_frequencies(f_min: float = 32.7, bins_per_octave: int = 12, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Geometric bin centres from f_min up to the last one below Nyquist."""
    n = int(math.floor(bins_per_octave * math.log2((sr / 2) / f_min))) + 1
    freqs = f_min * 2.0 ** (np.arange(n) / bins_per_octave)
    return freqs[freqs < sr / 2]


@functools.lru_cache(maxsize=8)
def _cqt_kernels(f_min: float, bins_per_octave: int, sr: int):
    freqs = cqt_frequencies(f_min, bins_per_octave, sr)
    q = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    kernels = []
    for f in freqs:
        n = int(math.ceil(q * sr / f))
        t = np.arange(n) - (n - 1) / 2.0
        win = np.hanning(n + 2)[1:-1]
        kernels.append((win / n) * np.exp(2j * np.pi * f * t / sr))
    return freqs, tuple(kernels)


def cqt_power(samples, f_min: float = 32.7, bins_per_octave: int = 12, hop: int = HOP) -> np.ndarray:
    """Constant-Q power spectrogram by direct inner products, (n_bins, T).

    Each bin k uses a Hann-windowed complex exponential of length Q*sr/f_k
    centred on frame n*hop (reflect padding at the edges), normalised by its
    length, so T = len//hop + 1 matches the STFT path.
    """
    freqs, kernels = _cqt_kernels(f_min, bins_per_octave, SAMPLE_RATE)
    longest = max(k.size for k in kernels)
    pad = longest // 2 + 1
    x = np.pad(samples, pad, mode="reflect")
    n_frames = samples.size // hop + 1
    centres = pad + hop * np.arange(n_frames)
    out = np.empty((len(freqs), n_frames))
    for i, ker in enumerate(kernels):
        n = ker.size
        start = centres - (n - 1) // 2
        win = np.lib.stride_tricks.sliding_window_view(x, n)[start]
        c = win @ ker
        out[i] = c.real**2 + c.imag**2
    return out


def frame_spectrogram(seg, cfg: SpectralConfig) -> np.ndarray:
    """Power spectrogram (n_bins, 126) of a 64000-sample segment."""
    s = _check_segment(seg)
    if cfg.transform == "stft":
        return stft_power(s, cfg.window_length, cfg.hop)
    return cqt_power(s, cfg.cqt_f_min, cfg.cqt_bins_per_octave, cfg.hop)


# ---------------------------------------------------------------------------
# filterbanks


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class Filterbank:
    weights: np.ndarray  # (M, n_bins), non-negative
    center_freqs: np.ndarray  # (M,) Hz, ascending

    @property
    def n_filters(self) -> int:
        return self.weights.shape[0]


def triangular_filterbank(bin_freqs: np.ndarray, centers: np.ndarray) -> Filterbank:
    """Unit-peak triangles, filter i rising from centre i-1 to centre i and
    falling to centre i+1. Outer edges extrapolate one spacing beyond the
    first and last centres so the whole [first, last] span is covered."""
    centers = np.asarray(centers, dtype=np.float64)
    lo = 2 * centers[0] - centers[1]
    hi = 2 * centers[-1] - centers[-2]
    edges = np.concatenate(([lo], centers, [hi]))
    f = np.asarray(bin_freqs, dtype=np.float64)[None, :]
    left, mid, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (f - left) / (mid - left)
    fall = (right - f) / (right - mid)
    w = np.maximum(0.0, np.minimum(rise, fall))
    return Filterbank(w, centers)


def _warped_centers(scale: str, f_min: float, f_max: float, m: int) -> np.ndarray:
    if scale == "linear":
        return np.linspace(f_min, f_max, m)
    if scale == "mel":
        return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), m))
    if scale == "log_scale":
        return np.geomspace(f_min, f_max, m)
    raise FeatureError(f"unknown frequency scale {scale!r}")


def bin_frequencies(cfg: SpectralConfig) -> np.ndarray:
    if cfg.transform == "stft":
        return np.fft.rfftfreq(cfg.window_length, 1.0 / SAMPLE_RATE)
    return cqt_frequencies(cfg.cqt_f_min, cfg.cqt_bins_per_octave)


@functools.lru_cache(maxsize=16)
def filterbank_for(cfg: SpectralConfig) -> Filterbank:
    centers = _warped_centers(cfg.freq_scale, cfg.f_min, cfg.f_max, cfg.n_filters)
    fb = triangular_filterbank(bin_frequencies(cfg), centers)
    empty = np.flatnonzero(fb.weights.max(axis=1) <= 0)
    if empty.size:
        raise FeatureError(f"filters {empty.tolist()} have no spectral bins; reduce n_filters")
    return fb


# ---------------------------------------------------------------------------
# cepstra and deltas


def dct_matrix(n_out: int, m: int) -> np.ndarray:
    """Orthonormal DCT-II rows j = 0..n_out-1 over m inputs."""
    j = np.arange(n_out)[:, None]
    i = np.arange(m)[None, :]
    d = np.cos(np.pi * j * (i + 0.5) / m) * math.sqrt(2.0 / m)
    d[0] /= math.sqrt(2.0)
    return d


def cepstra(power: np.ndarray, fb: Filterbank, n_cepstra: int = N_CEPSTRA, epsilon: float = 1e-10) -> np.ndarray:
    """Static cepstra (n_cepstra, T) from a power spectrogram (n_bins, T)."""
    m = fb.n_filters
    if m < n_cepstra:
        raise FeatureError(f"need at least {n_cepstra} filters, got {m}")
    if power.shape[0] != fb.weights.shape[1]:
        raise FeatureError(f"spectrogram has {power.shape[0]} bins, filterbank expects {fb.weights.shape[1]}")
    log_energy = np.log(fb.weights @ power + epsilon)
    return dct_matrix(n_cepstra, m) @ log_energy


def delta(x: np.ndarray, r: int = DELTA_WINDOW) -> np.ndarray:
    """Regression delta along time with R frames of edge replication."""
    t = x.shape[-1]
    if t <= 2 * r:
        raise FeatureError(f"need more than {2 * r} frames for a delta window of {r}, got {t}")
    xp = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(r, r)], mode="edge")
    num = np.zeros_like(x, dtype=np.float64)
    for k in range(1, r + 1):
        num += k * (xp[..., r + k : r + k + t] - xp[..., r - k : r - k + t])
    return num / (2.0 * sum(k * k for k in range(1, r + 1)))


def deltas(x: np.ndarray, r: int = DELTA_WINDOW) -> Tuple[np.ndarray, np.ndarray]:
    d1 = delta(x, r)
    return d1, delta(d1, r)


# ---------------------------------------------------------------------------
# full extraction


@dataclass(frozen=True)
class TFFeature:
    data: np.ndarray  # (1, 60, 126) float32
    kind: FeatureKind

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float32)
        if d.shape != (1, 3 * N_CEPSTRA, N_FRAMES):
            raise FeatureError(f"TFFeature must be (1, 60, 126), got {d.shape}")
        if not np.all(np.isfinite(d)):
            raise FeatureError("TFFeature contains non-finite values")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "kind", FeatureKind.parse(self.kind))


def extract(seg, kind="lfcc", cfg: SpectralConfig | None = None) -> TFFeature:
    """[X; dX; d2X] stacked on the frequency axis, shape (1, 60, 126)."""
    kind = FeatureKind.parse(kind)
    cfg = cfg or config_for(kind)
    power = frame_spectrogram(seg, cfg)
    x = cepstra(power, filterbank_for(cfg), cfg.n_cepstra, cfg.epsilon)
    d1, d2 = deltas(x)
    return TFFeature(np.concatenate([x, d1, d2], axis=0)[None], kind)


def extract_batch(segments, kind="lfcc") -> np.ndarray:
    """(N, 1, 60, 126) float32 array for an iterable of segments."""
    return np.stack([extract(s, kind).data for s in segments])
