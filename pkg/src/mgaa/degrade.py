"""Communication-channel degradation: codec round trips and frame packet loss.

Real codecs (AMR-WB, EVS, ...) are run as external encoder/decoder commands
described by a :class:`CodecManifest`. ``MULAW_STANDIN`` (G.711 mu-law, 8 bit)
and ``IDENTITY`` are built in so everything runs without external tools.
"""

from __future__ import annotations

import enum
import os
import shlex
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np

from .features import SAMPLE_RATE, SEGMENT_SAMPLES, AudioSegment
from .wavio import read_wav, write_wav

STANDARD_PLRS = (0.0, 0.01, 0.05, 0.10, 0.20)
SCRATCH_ENV = "MGAA_SCRATCH"


class CodecId(str, enum.Enum):
    AMRWB = "AMRWB"
    EVS = "EVS"
    IVAS = "IVAS"
    OPUS = "OPUS"
    SPEEX_WB = "SPEEX_WB"
    SILK = "SILK"
    MULAW_STANDIN = "MULAW_STANDIN"
    IDENTITY = "IDENTITY"

    @classmethod
    def parse(cls, value) -> "CodecId":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).upper())
        except ValueError:
            raise DegradationError(f"unknown codec {value!r}") from None


FULL_CODECS = (CodecId.AMRWB, CodecId.EVS, CodecId.IVAS, CodecId.OPUS, CodecId.SPEEX_WB, CodecId.SILK)
HERMETIC_CODECS = (CodecId.IDENTITY, CodecId.MULAW_STANDIN)


def default_bitrate(codec: CodecId) -> float:
    """Selected bitrate in kbps: AMR-WB tops out at 23.85, everything else 24.40."""
    return 23.85 if CodecId.parse(codec) is CodecId.AMRWB else 24.40


class DegradationError(RuntimeError):
    """Codec or loss simulation failure."""


class CodecCommandError(DegradationError):
    def __init__(self, command: str, returncode: int, stderr: str):
        super().__init__(f"command failed with exit status {returncode}: {command}\n{stderr.strip()}")
        self.command = command
        self.returncode = returncode
        self.stderr = stderr


@dataclass(frozen=True)
class LossModel:
    """``bernoulli`` (i.i.d. drops at ``plr``) or ``gilbert_elliott``.

    The Gilbert-Elliott chain drops every frame while in the bad state;
    ``p_gb`` is P(good -> bad) and ``p_bg`` is P(bad -> good).
    """

    kind: str = "bernoulli"
    p_gb: float = 0.0
    p_bg: float = 1.0

    def __post_init__(self):
        if self.kind not in ("bernoulli", "gilbert_elliott"):
            raise DegradationError(f"unknown loss model {self.kind!r}")
        if self.kind == "gilbert_elliott":
            if not (0.0 <= self.p_gb <= 1.0 and 0.0 < self.p_bg <= 1.0):
                raise DegradationError("Gilbert-Elliott needs p_gb in [0, 1] and p_bg in (0, 1]")

    @property
    def stationary_loss(self) -> float:
        return self.p_gb / (self.p_gb + self.p_bg)


def gilbert_elliott_for_plr(plr: float, mean_burst_frames: float = 2.0) -> LossModel:
    """Chain whose stationary loss rate equals ``plr`` with the given mean burst length."""
    if not 0.0 <= plr < 1.0:
        raise DegradationError("Gilbert-Elliott loss rate must lie in [0, 1)")
    if mean_burst_frames < 1.0:
        raise DegradationError("mean burst length must be >= 1 frame")
    p_bg = 1.0 / mean_burst_frames
    p_gb = min(1.0, plr * p_bg / (1.0 - plr))
    return LossModel("gilbert_elliott", p_gb, p_bg)


@dataclass(frozen=True)
class DegradationSpec:
    codec: CodecId = CodecId.IDENTITY
    plr: float = 0.0
    loss_model: LossModel = field(default_factory=LossModel)
    frame_ms: float = 20.0
    seed: int = 0
    bitrate: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "codec", CodecId.parse(self.codec))
        if not 0.0 <= self.plr <= 1.0:
            raise DegradationError(f"plr must lie in [0, 1], got {self.plr}")
        if self.frame_ms <= 0:
            raise DegradationError("frame_ms must be positive")
        if self.bitrate is None:
            object.__setattr__(self, "bitrate", default_bitrate(self.codec))

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_ms * SAMPLE_RATE / 1000.0))

    def effective_loss_model(self) -> LossModel:
        lm = self.loss_model
        if lm.kind == "gilbert_elliott" and lm.p_gb == 0.0 and self.plr > 0.0:
            # bare "gilbert_elliott" request: parameterise from plr
            return gilbert_elliott_for_plr(min(self.plr, 0.999))
        return lm


# ---------------------------------------------------------------------------
# packet loss


def loss_pattern(n_frames: int, plr: float, model: LossModel, rng: np.random.Generator) -> np.ndarray:
    """Boolean drop mask of length ``n_frames``. A rate of 1 drops every frame under any model."""
    if plr >= 1.0:
        return np.ones(n_frames, dtype=bool)
    if model.kind == "bernoulli":
        if plr <= 0.0:
            return np.zeros(n_frames, dtype=bool)
        return rng.random(n_frames) < plr
    u = rng.random(n_frames)
    lost = np.empty(n_frames, dtype=bool)
    bad = u[0] < model.stationary_loss
    lost[0] = bad
    p_gb, p_bg = model.p_gb, model.p_bg
    for i in range(1, n_frames):
        bad = (u[i] >= p_bg) if bad else (u[i] < p_gb)
        lost[i] = bad
    return lost


def packet_loss(seg: AudioSegment, spec: DegradationSpec) -> AudioSegment:
    """Zero-fill every dropped 20 ms frame. The mask is drawn from the seed alone."""
    fs = spec.frame_samples
    n_frames = -(-SEGMENT_SAMPLES // fs)
    rng = np.random.default_rng(spec.seed)
    lost = loss_pattern(n_frames, spec.plr, spec.effective_loss_model(), rng)
    if not lost.any():
        return seg
    mask = np.repeat(~lost, fs)[:SEGMENT_SAMPLES]
    return AudioSegment(seg.samples * mask)


# ---------------------------------------------------------------------------
# codecs

_MU_BIAS = 0x84
_MU_CLIP = 32635


def mulaw_encode(pcm16: np.ndarray) -> np.ndarray:
    """G.711 mu-law: int16 PCM -> uint8 codewords."""
    x = np.asarray(pcm16, dtype=np.int32)
    sign = np.where(x < 0, 0x80, 0x00)
    mag = np.minimum(np.abs(x), _MU_CLIP) + _MU_BIAS
    exponent = np.floor(np.log2(mag)).astype(np.int32) - 7
    exponent = np.clip(exponent, 0, 7)
    mantissa = (mag >> (exponent + 3)) & 0x0F
    return (~(sign | (exponent << 4) | mantissa) & 0xFF).astype(np.uint8)


def mulaw_decode(code: np.ndarray) -> np.ndarray:
    """G.711 mu-law: uint8 codewords -> int16 PCM."""
    u = ~np.asarray(code, dtype=np.int32) & 0xFF
    sign = u & 0x80
    exponent = (u >> 4) & 0x07
    mantissa = u & 0x0F
    mag = (((mantissa << 3) + _MU_BIAS) << exponent) - _MU_BIAS
    return np.where(sign, -mag, mag).astype(np.int16)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype(np.int16)


def from_pcm16(pcm: np.ndarray) -> np.ndarray:
    return np.asarray(pcm, dtype=np.float64) / 32768.0


@dataclass(frozen=True)
class CodecEntry:
    codec: CodecId
    encode_cmd: str
    decode_cmd: str
    ext: str
    rate: int = SAMPLE_RATE


class CodecManifest:
    """Encoder/decoder command templates per codec.

    Text format, one codec per line (``#`` comments allowed)::

        codec_id | encode_cmd | decode_cmd | ext | rate

    Templates use ``{in}``, ``{out}`` and optionally ``{bitrate}`` (kbps) and
    ``{bps}`` (bits per second).
    """

    def __init__(self, entries: Optional[Dict[CodecId, CodecEntry]] = None):
        self.entries: Dict[CodecId, CodecEntry] = dict(entries or {})

    @classmethod
    def parse(cls, text: str) -> "CodecManifest":
        entries = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split("|")]
            if len(parts) != 5:
                raise DegradationError(f"codec manifest line {lineno}: expected 5 '|'-separated fields, got {len(parts)}")
            codec = CodecId.parse(parts[0])
            enc, dec, ext, rate = parts[1], parts[2], parts[3].lstrip("."), parts[4]
            for name, tmpl in (("encode", enc), ("decode", dec)):
                if "{in}" not in tmpl or "{out}" not in tmpl:
                    raise DegradationError(f"codec manifest line {lineno}: {name} template needs {{in}} and {{out}}")
            try:
                rate_hz = int(rate)
            except ValueError:
                raise DegradationError(f"codec manifest line {lineno}: bad sample rate {rate!r}") from None
            entries[codec] = CodecEntry(codec, enc, dec, ext, rate_hz)
        return cls(entries)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CodecManifest":
        return cls.parse(Path(path).read_text())

    def get(self, codec: CodecId) -> Optional[CodecEntry]:
        return self.entries.get(CodecId.parse(codec))

    def missing_tools(self, codec: CodecId) -> list:
        """Executables referenced by the codec's templates that are not on PATH."""
        entry = self.get(codec)
        if entry is None:
            return [f"<no manifest entry for {CodecId.parse(codec).value}>"]
        missing = []
        for tmpl in (entry.encode_cmd, entry.decode_cmd):
            exe = shlex.split(tmpl)[0]
            if shutil.which(exe) is None and not Path(exe).is_file():
                missing.append(exe)
        return missing

    def available(self, codec: CodecId) -> bool:
        codec = CodecId.parse(codec)
        if codec in HERMETIC_CODECS:
            return True
        return not self.missing_tools(codec)


def _fit_length(x: np.ndarray) -> np.ndarray:
    if x.size >= SEGMENT_SAMPLES:
        return x[:SEGMENT_SAMPLES]
    return np.pad(x, (0, SEGMENT_SAMPLES - x.size))


def _run(cmd: str) -> None:
    proc = subprocess.run(cmd, shell=True, capture_output=True, text=True)
    if proc.returncode != 0:
        raise CodecCommandError(cmd, proc.returncode, proc.stderr)


def codec_roundtrip(seg: AudioSegment, spec: DegradationSpec, manifest: Optional[CodecManifest] = None) -> AudioSegment:
    """Encode then decode ``seg``; output is trimmed or zero-padded to 4 s."""
    codec = spec.codec
    if codec is CodecId.IDENTITY:
        return seg
    if codec is CodecId.MULAW_STANDIN:
        return AudioSegment(from_pcm16(mulaw_decode(mulaw_encode(to_pcm16(seg.samples)))))
    entry = manifest.get(codec) if manifest is not None else None
    if entry is None:
        raise DegradationError(f"no codec manifest entry for {codec.value}")
    scratch_root = os.environ.get(SCRATCH_ENV) or None
    with tempfile.TemporaryDirectory(prefix="mgaa-codec-", dir=scratch_root) as tmp:
        src = Path(tmp) / "input.wav"
        mid = Path(tmp) / f"encoded.{entry.ext}"
        dst = Path(tmp) / "decoded.wav"
        write_wav(src, seg.samples)
        subs = dict(bitrate=f"{spec.bitrate:g}", bps=str(int(round(spec.bitrate * 1000))))
        _run(entry.encode_cmd.format(**{"in": shlex.quote(str(src)), "out": shlex.quote(str(mid))}, **subs))
        _run(entry.decode_cmd.format(**{"in": shlex.quote(str(mid)), "out": shlex.quote(str(dst))}, **subs))
        if not dst.exists():
            raise DegradationError(f"decoder for {codec.value} produced no output file")
        samples, rate = read_wav(dst, expected_rate=None)
        if rate != SAMPLE_RATE or rate != entry.rate:
            raise DegradationError(f"{codec.value} decoded at {rate} Hz; expected {SAMPLE_RATE} Hz")
    return AudioSegment(_fit_length(samples))


def degrade(seg: AudioSegment, spec: DegradationSpec, manifest: Optional[CodecManifest] = None) -> AudioSegment:
    """Codec round trip, then packet loss on the decoded waveform."""
    return packet_loss(codec_roundtrip(seg, spec, manifest), spec)
