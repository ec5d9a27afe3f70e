"""Seeded synthetic corpus of real-like and fake-like 4 s segments.

Both classes share a voiced source: a harmonic series on a drifting pitch,
shaped by random formant resonances and gated by a syllable envelope.
They differ in spectral fine structure:

* real-like: breathy aspiration noise spread across the whole band and
  natural pitch jitter;
* fake-like: a perfectly smooth pitch track and a narrow band of tonal
  "vocoder" residue between 5 and 7 kHz, with no aspiration.

The cues are spectral and spread over every frame, so they survive
8-bit companding and a fifth of the frames going silent.
"""

from __future__ import annotations

from typing import List, Tuple

import numpy as np
from scipy import signal

from .features import SAMPLE_RATE, SEGMENT_SAMPLES, AudioSegment


def _formant_filter(x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    y = np.zeros_like(x)
    for lo, hi in ((300, 900), (900, 2400), (2400, 3500)):
        f = rng.uniform(lo, hi)
        b, a = signal.iirpeak(f, Q=rng.uniform(3, 8), fs=SAMPLE_RATE)
        y += signal.lfilter(b, a, x)
    return y


def _voiced(rng: np.random.Generator, n: int, jitter: float) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(90, 220) * (1 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * t))
    if jitter > 0:
        f0 = f0 * (1 + jitter * np.convolve(rng.standard_normal(n), np.ones(80) / 80, mode="same") * 9)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    n_harm = int(3800 // f0.max())
    src = sum(np.sin(h * phase) / h for h in range(1, n_harm + 1))
    return _formant_filter(src, rng)


def _envelope(rng: np.random.Generator, n: int) -> np.ndarray:
    rate = rng.uniform(3, 5)  # syllables per second
    t = np.arange(n) / SAMPLE_RATE
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return np.clip(env, 0.1, 1.0)


def _bandpass(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    sos = signal.butter(4, [lo, hi], btype="bandpass", fs=SAMPLE_RATE, output="sos")
    return signal.sosfilt(sos, x)


def make_segment(label: int, rng: np.random.Generator) -> AudioSegment:
    """One synthetic utterance; ``label`` 0 is real-like and 1 is fake-like."""
    n = SEGMENT_SAMPLES
    env = _envelope(rng, n)
    if label == 0:
        x = _voiced(rng, n, jitter=0.01)
        x /= np.std(x) + 1e-12
        breath = _bandpass(rng.standard_normal(n), 150, 7800)
        x = x + rng.uniform(0.25, 0.4) * breath / (np.std(breath) + 1e-12)
    else:
        x = _voiced(rng, n, jitter=0.0)
        x /= np.std(x) + 1e-12
        t = np.arange(n) / SAMPLE_RATE
        residue = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in rng.uniform(5000, 7000, size=6))
        residue += _bandpass(rng.standard_normal(n), 5000, 7000) * 2
        x = x + rng.uniform(0.25, 0.4) * residue / (np.std(residue) + 1e-12)
    x = x * env
    x *= rng.uniform(0.2, 0.6) / (np.max(np.abs(x)) + 1e-12)
    return AudioSegment(x.astype(np.float64))


def make_corpus(n_real: int, n_fake: int, seed: int = 0) -> Tuple[List[AudioSegment], np.ndarray]:
    """Interleaved, seeded corpus; returns (segments, labels)."""
    labels = np.array([0] * n_real + [1] * n_fake, dtype=np.int64)
    order = np.random.default_rng(seed).permutation(len(labels))
    labels = labels[order]
    children = np.random.SeedSequence(seed).spawn(len(labels))
    segs = [make_segment(int(lab), np.random.default_rng(c)) for lab, c in zip(labels, children)]
    return segs, labels


def gaussian_blobs(n: int, seed: int = 0, separation: float = 60.0, shape=(1, 60, 126)) -> Tuple[np.ndarray, np.ndarray]:
    """Two isotropic Gaussian clouds in feature-tensor shape.

    The class means sit at +/- ``separation``/2 standard deviations along a
    smooth unit-norm pattern (a few low-order 2-D cosines), so the classes
    are linearly separable with margin set by ``separation``.
    """
    rng = np.random.default_rng(seed)
    direction = smooth_pattern(shape, rng)
    y = rng.permutation(np.arange(n) % 2).astype(np.int64)
    noise = rng.standard_normal((n,) + tuple(shape))
    x = noise + (y - 0.5)[:, None, None, None] * separation * direction
    return x.astype(np.float32), y


def smooth_pattern(shape, rng: np.random.Generator, n_terms: int = 6) -> np.ndarray:
    """Unit-norm sum of random low-frequency 2-D cosines."""
    _, f, t = shape
    fi, ti = np.meshgrid(np.arange(f) / f, np.arange(t) / t, indexing="ij")
    pat = np.zeros((f, t))
    for _ in range(n_terms):
        a, b = rng.integers(0, 4, size=2)
        pat += rng.standard_normal() * np.cos(np.pi * (a * fi + b * ti) + rng.uniform(0, 2 * np.pi))
    pat = pat.reshape(shape)
    return pat / np.linalg.norm(pat)
