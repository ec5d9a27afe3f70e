"""On-disk formats: feature/embedding records, checkpoints and text manifests.

Binary records are little-endian throughout.

Feature / embedding record::

    magic[8] ("MGAATF01" | "MGAAEMB1") | u8 kind | u32 d0 | u32 d1 | u32 d2 | f32 payload (row-major)

Checkpoint::

    "MGAACKPT" | u32 len | config text (utf-8) | sha256(config text)[32]
    | u32 n | n x (u16 name_len | name | u8 ndim | u32 dims... | f32 payload)

Tensor names are prefixed ``param.``, ``buffer.`` or ``opt.``.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from .features import FeatureKind, TFFeature
from .model import ConfigError, MGAANet, ModelConfig
from .train import TrainConfig

PathLike = Union[str, Path]

FEATURE_MAGIC = b"MGAATF01"
EMBED_MAGIC = b"MGAAEMB1"
CKPT_MAGIC = b"MGAACKPT"


class FormatError(ValueError):
    pass


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write to a temp file in the destination directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# feature and embedding records


def _pack_record(magic: bytes, kind: int, array: np.ndarray) -> bytes:
    a = np.ascontiguousarray(array, dtype="<f4")
    if a.ndim != 3:
        raise FormatError(f"record payload must be 3-D, got {a.ndim}-D")
    return magic + struct.pack("<B3I", int(kind), *a.shape) + a.tobytes()


def _unpack_record(buf: bytes, magic: bytes, what: str) -> Tuple[int, np.ndarray]:
    head = len(magic) + struct.calcsize("<B3I")
    if len(buf) < head or buf[: len(magic)] != magic:
        raise FormatError(f"not a {what} record (bad magic)")
    kind, d0, d1, d2 = struct.unpack_from("<B3I", buf, len(magic))
    n = d0 * d1 * d2
    if len(buf) != head + 4 * n:
        raise FormatError(f"{what} record truncated or oversized: dims {(d0, d1, d2)}, {len(buf) - head} payload bytes")
    return kind, np.frombuffer(buf, dtype="<f4", count=n, offset=head).reshape(d0, d1, d2).copy()


def feature_to_bytes(feat: TFFeature) -> bytes:
    return _pack_record(FEATURE_MAGIC, feat.kind, feat.data)


def feature_from_bytes(buf: bytes) -> TFFeature:
    kind, data = _unpack_record(buf, FEATURE_MAGIC, "feature")
    try:
        return TFFeature(data, FeatureKind(kind))
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def write_feature(path: PathLike, feat: TFFeature) -> None:
    atomic_write_bytes(path, feature_to_bytes(feat))


def read_feature(path: PathLike) -> TFFeature:
    return feature_from_bytes(Path(path).read_bytes())


def write_embeddings(path: PathLike, emb: np.ndarray, kind=FeatureKind.LFCC) -> None:
    """(N, d) embeddings stored as a (1, N, d) record."""
    emb = np.asarray(emb)
    atomic_write_bytes(path, _pack_record(EMBED_MAGIC, FeatureKind.parse(kind), emb[None]))


def read_embeddings(path: PathLike) -> Tuple[FeatureKind, np.ndarray]:
    kind, data = _unpack_record(Path(path).read_bytes(), EMBED_MAGIC, "embedding")
    return FeatureKind(kind), data[0]


# ---------------------------------------------------------------------------
# run configuration (key = value)


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


_TUPLE_INT = {"cfeb_channels", "window_set", "hidden_dims"}
_TUPLE_STR = {"mgaa_placement"}
RUN_KEYS = {"feature"}


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    feature: FeatureKind = FeatureKind.LFCC

    def to_text(self) -> str:
        lines = [f"feature = {self.feature.name.lower()}"]
        for name in ModelConfig.field_names():
            lines.append(f"{name} = {_fmt_value(getattr(self.model, name))}")
        for name in TrainConfig.field_names():
            lines.append(f"{name} = {_fmt_value(getattr(self.train, name))}")
        return "\n".join(lines) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if key in _TUPLE_INT:
            return tuple(int(t) for t in raw.replace(" ", "").split(",") if t)
        if key in _TUPLE_STR:
            return tuple(t.strip() for t in raw.split(",") if t.strip())
        if isinstance(default, bool):
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_config_text(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse ``key = value`` lines onto ``base`` (defaults if None). Unknown keys are errors."""
    base = base or RunConfig(ModelConfig(), TrainConfig())
    model_kw = {n: getattr(base.model, n) for n in ModelConfig.field_names()}
    train_kw = {n: getattr(base.train, n) for n in TrainConfig.field_names()}
    feature = base.feature
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key == "feature":
            try:
                feature = FeatureKind.parse(value)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
        elif key in model_kw:
            model_kw[key] = _coerce(key, value, model_kw[key])
        elif key in train_kw:
            train_kw[key] = _coerce(key, value, train_kw[key])
        else:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
    cfg = RunConfig(ModelConfig(**model_kw), TrainConfig(**train_kw), feature)
    cfg.model.validate()
    cfg.train.validate()
    return cfg


def load_config(path: Optional[PathLike], overrides: Optional[Dict[str, str]] = None) -> RunConfig:
    """Defaults, then file values, then ``overrides`` (flag values)."""
    cfg = RunConfig(ModelConfig(), TrainConfig())
    if path is not None:
        cfg = parse_config_text(Path(path).read_text(), cfg)
    if overrides:
        cfg = parse_config_text("\n".join(f"{k} = {v}" for k, v in overrides.items()), cfg)
    return cfg


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(net: MGAANet, run: RunConfig, optimizer_state: Optional[Dict[str, np.ndarray]] = None) -> bytes:
    text = run.to_text().encode("utf-8")
    tensors: List[Tuple[str, np.ndarray]] = [(f"param.{k}", v) for k, v in net.params.items()]
    tensors += [(f"buffer.{k}", v) for k, v in net.buffers.items()]
    if optimizer_state:
        tensors += [(f"opt.{k}", v) for k, v in optimizer_state.items()]
    parts = [CKPT_MAGIC, struct.pack("<I", len(text)), text, hashlib.sha256(text).digest(), struct.pack("<I", len(tensors))]
    for name, arr in tensors:
        a = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack(f"<B{a.ndim}I", a.ndim, *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def save_checkpoint(path: PathLike, net: MGAANet, run: RunConfig, optimizer_state=None) -> None:
    atomic_write_bytes(path, checkpoint_bytes(net, run, optimizer_state))


def load_checkpoint(path: PathLike) -> Tuple[MGAANet, RunConfig, Dict[str, np.ndarray]]:
    """Returns (net, run config, optimizer state). Raises FormatError on any corruption."""
    buf = Path(path).read_bytes()
    try:
        return _parse_checkpoint(buf)
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed checkpoint {path}: {exc}") from exc


def _parse_checkpoint(buf: bytes):
    if buf[:8] != CKPT_MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    off = 8
    (n_text,) = struct.unpack_from("<I", buf, off)
    off += 4
    text = buf[off : off + n_text]
    off += n_text
    digest = buf[off : off + 32]
    off += 32
    if hashlib.sha256(text).digest() != digest:
        raise FormatError("checkpoint config digest mismatch")
    run = parse_config_text(text.decode("utf-8"))
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    params, buffers, opt = {}, {}, {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<B", buf, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        count = int(np.prod(dims)) if ndim else 1
        if off + 4 * count > len(buf):
            raise FormatError(f"checkpoint truncated inside tensor {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)
        off += 4 * count
        group, _, key = name.partition(".")
        {"param": params, "buffer": buffers, "opt": opt}.get(group, {})[key] = arr
    if off != len(buf):
        raise FormatError("trailing bytes after checkpoint tensor table")
    try:
        net = MGAANet(run.model, params, buffers)
    except (ConfigError, ValueError) as exc:
        raise FormatError(f"checkpoint tensors do not match its config: {exc}") from exc
    return net, run, opt


# ---------------------------------------------------------------------------
# corpus manifest: path<TAB>label<TAB>split

LABELS = {"real": 0, "fake": 1}
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class CorpusEntry:
    path: Path
    label: int
    split: str

    @property
    def label_name(self) -> str:
        return "real" if self.label == 0 else "fake"


def parse_corpus_manifest(text: str, root: Optional[PathLike] = None, check_paths: bool = True) -> List[CorpusEntry]:
    """Relative paths resolve against ``root`` (usually the manifest's directory)."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 3:
            raise FormatError(f"manifest line {lineno}: expected path<TAB>label<TAB>split")
        path, label, split = (p.strip() for p in parts)
        if label not in LABELS:
            raise FormatError(f"manifest line {lineno}: label must be real or fake, got {label!r}")
        if split not in SPLITS:
            raise FormatError(f"manifest line {lineno}: split must be one of {SPLITS}, got {split!r}")
        p = Path(path)
        if root is not None and not p.is_absolute():
            p = Path(root) / p
        if check_paths and not p.exists():
            raise FormatError(f"manifest line {lineno}: {p} does not exist")
        entries.append(CorpusEntry(p, LABELS[label], split))
    return entries


def read_corpus_manifest(path: PathLike, check_paths: bool = True) -> List[CorpusEntry]:
    path = Path(path)
    return parse_corpus_manifest(path.read_text(), path.parent, check_paths)


def format_corpus_manifest(entries, root: Optional[PathLike] = None) -> str:
    lines = []
    for e in entries:
        p = Path(e.path)
        if root is not None:
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
        lines.append(f"{p}\t{e.label_name}\t{e.split}")
    return "\n".join(lines) + "\n"


def feature_filename(audio_path: PathLike, kind) -> str:
    """Stable feature-file name: stem plus a short hash of the full path."""
    p = Path(audio_path)
    h = hashlib.sha1(str(p.resolve()).encode("utf-8")).hexdigest()[:10]
    return f"{p.stem}-{h}.{FeatureKind.parse(kind).name.lower()}.tf"
