"""``mgaa`` command line: extract, degrade, train, eval, embed.

Exit codes: 0 success, 1 partial per-file failure, 2 configuration or
validation error. Every output file is written under a temporary name and
renamed into place.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .degrade import (
    HERMETIC_CODECS,
    FULL_CODECS,
    STANDARD_PLRS,
    CodecManifest,
    DegradationError,
    LossModel,
)
from .evaluation import ConditionMatrix, EvaluationError, Utterance, build_conditions, evaluate, separability
from .features import AudioSegment, FeatureError, FeatureKind, extract
from .formats import (
    FormatError,
    RunConfig,
    atomic_write_text,
    feature_filename,
    load_checkpoint,
    load_config,
    read_corpus_manifest,
    read_feature,
    save_checkpoint,
    write_embeddings,
    write_feature,
)
from .model import ConfigError
from .train import train
from .wavio import WavFormatError, read_wav, write_wav

log = logging.getLogger("mgaa")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
DEGRADED_INDEX = "cells.tsv"
MATRIX_REPORT = "matrix.csv"


class UsageError(Exception):
    """Configuration or validation problem detected before any output is written."""


def _load_segment(path: Path) -> AudioSegment:
    samples, _ = read_wav(path)
    return AudioSegment.from_samples(samples)


def _parse_plrs(text: Optional[str]) -> Tuple[float, ...]:
    if text is None:
        return STANDARD_PLRS
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise UsageError(f"--plr expects comma-separated fractions, got {text!r}") from None
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise UsageError("--plr values must lie in [0, 1]")
    return vals


def _manifest(path: str):
    try:
        return read_corpus_manifest(path)
    except (OSError, FormatError) as exc:
        raise UsageError(f"corpus manifest: {exc}") from exc


def _run_config(args, extra: Optional[Dict[str, str]] = None) -> RunConfig:
    overrides = dict(extra or {})
    if getattr(args, "feature", None):
        overrides["feature"] = args.feature
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    try:
        return load_config(args.config, overrides)
    except OSError as exc:
        raise UsageError(f"config: {exc}") from exc


# ---------------------------------------------------------------------------
# extract


def _extract_one(job: Tuple[str, str, int]) -> Tuple[str, Optional[str], bool]:
    """Returns (audio path, error or None, written)."""
    src, dst, kind = job
    dst_p = Path(dst)
    if dst_p.exists():
        try:
            if read_feature(dst_p).kind == kind:
                return src, None, False
        except (FormatError, OSError):
            pass  # corrupt leftover: recompute
    try:
        write_feature(dst_p, extract(_load_segment(Path(src)), kind))
    except (WavFormatError, FeatureError, OSError) as exc:
        return src, str(exc), False
    return src, None, True


def _map(fn, jobs, workers: int):
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def cmd_extract(args) -> int:
    entries = _manifest(args.manifest)
    kind = FeatureKind.parse(args.feature or "lfcc")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(str(e.path), str(out / feature_filename(e.path, kind)), int(kind)) for e in entries]
    results = _map(_extract_one, jobs, args.workers)
    written = sum(w for _, _, w in results)
    failures = [(s, err) for s, err, _ in results if err]
    for src, err in failures:
        log.error("extract failed: %s", err)
    print(f"extracted {written} file(s), {len(entries) - written - len(failures)} up to date, {len(failures)} failed")
    return EXIT_PARTIAL if failures else EXIT_OK


def _load_features(entries, feature_dir: Path, kind) -> Tuple[np.ndarray, np.ndarray, List[str]]:
    xs, ys, missing = [], [], []
    for e in entries:
        p = feature_dir / feature_filename(e.path, kind)
        try:
            f = read_feature(p)
        except (OSError, FormatError):
            missing.append(str(e.path))
            continue
        if f.kind != kind:
            missing.append(str(e.path))
            continue
        xs.append(f.data)
        ys.append(e.label)
    x = np.stack(xs) if xs else np.zeros((0, 1, 60, 126), np.float32)
    return x, np.array(ys, dtype=np.int64), missing


# ---------------------------------------------------------------------------
# degrade


def _matrix_from_args(args) -> Tuple[ConditionMatrix, Optional[CodecManifest]]:
    manifest = None
    if args.codec_manifest:
        try:
            manifest = CodecManifest.load(args.codec_manifest)
        except (OSError, DegradationError) as exc:
            raise UsageError(f"codec manifest: {exc}") from exc
    codecs = HERMETIC_CODECS if args.matrix == "hermetic" else FULL_CODECS
    try:
        lm = LossModel(args.loss_model)
    except DegradationError as exc:
        raise UsageError(str(exc)) from exc
    return ConditionMatrix.build(codecs, _parse_plrs(args.plr), lm), manifest


def cmd_degrade(args) -> int:
    entries = _manifest(args.manifest)
    matrix, manifest = _matrix_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus, failures = [], []
    for e in entries:
        try:
            corpus.append((e, Utterance(str(e.path), _load_segment(e.path), e.label)))
        except (WavFormatError, FeatureError, OSError) as exc:
            failures.append(str(exc))
            log.error("degrade: cannot read %s", exc)
    if not corpus:
        print("no readable audio in manifest", file=sys.stderr)
        return EXIT_PARTIAL
    by_uid = {u.uid: e for e, u in corpus}
    index_rows = []
    seen: Dict[Tuple[str, str], int] = {}

    def dest_for(cell, utt) -> Path:
        stem = Path(utt.uid).stem
        n = seen.get((cell.key, stem), 0)
        seen[(cell.key, stem)] = n + 1
        name = f"{stem}.wav" if n == 0 else f"{stem}-{n}.wav"
        return out / cell.condition / cell.codec_name / name

    def save(cell, utt):
        dst = dest_for(cell, utt)
        dst.parent.mkdir(parents=True, exist_ok=True)
        write_wav(dst, utt.segment.samples)
        e = by_uid[utt.uid]
        index_rows.append((str(dst.relative_to(out)), e.label_name, e.split, cell.key))

    degraded = build_conditions([u for _, u in corpus], matrix, manifest, seed=args.seed if args.seed is not None else 0, on_item=save)
    for cell in matrix.cells:
        if cell.codec is None:
            for utt in degraded[cell.key]:
                save(cell, utt)
    buf = io.StringIO()
    w = csv.writer(buf, delimiter="\t", lineterminator="\n")
    w.writerows(sorted(index_rows, key=lambda r: (r[3], r[0])))
    atomic_write_text(out / DEGRADED_INDEX, buf.getvalue())
    rep = io.StringIO()
    w = csv.writer(rep, lineterminator="\n")
    w.writerow(("cell", "condition", "codec", "plr", "count", "status"))
    for cell in matrix.cells:
        status = matrix.skipped.get(cell.key, "ok")
        w.writerow((cell.key, cell.condition, cell.codec_name, "" if cell.plr is None else f"{cell.plr:g}", matrix.counts.get(cell.key, 0), status))
    atomic_write_text(out / MATRIX_REPORT, rep.getvalue())
    n_cells = len(matrix.cells) - len(matrix.skipped)
    print(f"{len(index_rows)} degraded file(s) over {n_cells} cell(s); {len(matrix.skipped)} cell(s) skipped")
    for key, why in matrix.skipped.items():
        log.warning("skipped %s: %s", key, why)
    return EXIT_PARTIAL if failures or matrix.skipped else EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    run = _run_config(args)
    entries = _manifest(args.manifest)
    feature_dir = Path(args.features)
    if not feature_dir.is_dir():
        raise UsageError(f"feature directory {feature_dir} does not exist")
    tr = [e for e in entries if e.split == "train"]
    va = [e for e in entries if e.split == "val"]
    if not tr:
        raise UsageError("manifest has no train entries")
    x, y, miss = _load_features(tr, feature_dir, run.feature)
    xv = yv = None
    if va:
        xv, yv, miss_v = _load_features(va, feature_dir, run.feature)
        miss += miss_v
    for m in miss:
        log.error("no %s feature file for %s", run.feature.name.lower(), m)
    if len(x) == 0 or (va and len(xv) == 0):
        raise UsageError("no usable features for the train or val split (run `mgaa extract` first)")
    result = train(x, y, run.model, run.train, xv, yv)
    out = Path(args.out)
    save_checkpoint(out, result.net, run, result.optimizer.state())
    atomic_write_text(out.with_name(out.name + ".history.csv"), result.history_csv())
    best = result.history[result.best_epoch - 1]
    print(f"trained {len(result.history)} epoch(s); best epoch {result.best_epoch} val loss {best.val_loss:.4f} val EER {best.val_eer:.4f}")
    return EXIT_PARTIAL if miss else EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _checkpoint(path: str):
    try:
        return load_checkpoint(path)
    except (OSError, FormatError, ConfigError) as exc:
        raise UsageError(f"checkpoint {path}: {exc}") from exc


def _read_index(root: Path):
    idx = root / DEGRADED_INDEX
    if not idx.is_file():
        raise UsageError(f"{idx} not found (run `mgaa degrade` first)")
    rows = []
    for lineno, line in enumerate(idx.read_text().splitlines(), start=1):
        parts = line.split("\t")
        if len(parts) != 4 or parts[1] not in ("real", "fake"):
            raise UsageError(f"{idx} line {lineno}: malformed")
        rows.append((root / parts[0], 0 if parts[1] == "real" else 1, parts[2], parts[3]))
    return rows


def _matrix_from_report(root: Path) -> ConditionMatrix:
    from .degrade import CodecId
    from .evaluation import ConditionCell

    rep = root / MATRIX_REPORT
    if not rep.is_file():
        raise UsageError(f"{rep} not found")
    cells, skipped = [], {}
    for row in csv.DictReader(rep.read_text().splitlines()):
        codec = None if row["codec"] == "CLEAN" else CodecId.parse(row["codec"])
        cells.append(ConditionCell(row["condition"], codec, float(row["plr"]) if row["plr"] else None))
        if row["status"] != "ok":
            skipped[row["cell"]] = row["status"]
    return ConditionMatrix(cells, skipped=skipped)


def cmd_eval(args) -> int:
    net, run, _ = _checkpoint(args.checkpoint)
    root = Path(args.degraded)
    rows = _read_index(root)
    matrix = _matrix_from_report(root)
    splits = set(args.splits.split(","))
    by_cell: Dict[str, Tuple[List[np.ndarray], List[int]]] = {}
    failures = 0
    for path, label, split, key in rows:
        if split not in splits:
            continue
        try:
            f = extract(_load_segment(path), run.feature)
        except (WavFormatError, FeatureError, OSError) as exc:
            log.error("eval: %s", exc)
            failures += 1
            continue
        xs, ys = by_cell.setdefault(key, ([], []))
        xs.append(f.data)
        ys.append(label)
    cell_data = {k: (np.stack(xs), np.array(ys)) for k, (xs, ys) in by_cell.items()}
    embed_fn = net.embed if args.embed_dir else None
    report = evaluate(net.scores, cell_data, matrix, embed_fn)
    report.write_csv(args.out)
    if args.embed_dir:
        ed = Path(args.embed_dir)
        for key, (emb, labels) in report.embeddings.items():
            write_embeddings(ed / (key.replace("/", "_") + ".emb"), emb, run.feature)
            atomic_write_text(ed / (key.replace("/", "_") + ".labels"), "\n".join(map(str, labels)) + "\n")
    table = report.table()
    print("  ".join(f"{k} {'N/A' if v is None else f'{100 * v:.2f}%'}" for k, v in table.items()))
    print(f"monotone C1..C{len(table) - 2} trend: {'yes' if report.monotone_trend() else 'no'}")
    return EXIT_PARTIAL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# embed


def cmd_embed(args) -> int:
    net, run, _ = _checkpoint(args.checkpoint)
    entries = _manifest(args.manifest)
    if args.split:
        entries = [e for e in entries if e.split == args.split]
    x, y, miss = _load_features(entries, Path(args.features), run.feature)
    for m in miss:
        log.error("no feature file for %s", m)
    if len(x) == 0:
        raise UsageError("no feature files found for the selected entries")
    emb = net.embed(x)
    out = Path(args.out)
    write_embeddings(out, emb, run.feature)
    atomic_write_text(out.with_name(out.name + ".labels"), "\n".join(map(str, y)) + "\n")
    lines = [f"n = {len(y)}", f"dim = {emb.shape[1]}"]
    try:
        sep = separability(emb, y)
        lines += [f"silhouette = {sep['silhouette']:.6f}", f"fisher_ratio = {sep['fisher_ratio']:.6f}"]
    except EvaluationError as exc:
        lines.append(f"separability = N/A ({exc})")
    atomic_write_text(out.with_name(out.name + ".separability.txt"), "\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_PARTIAL if miss else EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mgaa", description="Audio deepfake detection with multi-granularity adaptive attention.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, feature=True):
        if feature:
            sp.add_argument("--feature", choices=["lfcc", "cqcc", "mfcc"])
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)
        sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("extract", help="audio manifest -> feature files")
    sp.add_argument("--manifest", required=True)
    common(sp)
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("degrade", help="build the codec x packet-loss condition matrix")
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--matrix", choices=["hermetic", "full"], default="hermetic", help="stand-in codecs or the six external codecs")
    sp.add_argument("--codec-manifest")
    sp.add_argument("--plr", help="comma-separated loss rates (default 0,0.01,0.05,0.1,0.2)")
    sp.add_argument("--loss-model", choices=["bernoulli", "gilbert_elliott"], default="bernoulli")
    common(sp, feature=False)
    sp.set_defaults(func=cmd_degrade)

    sp = sub.add_parser("train", help="train from extracted features")
    sp.add_argument("--features", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--config")
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="per-condition EER report over a degraded corpus")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--degraded", required=True)
    sp.add_argument("--splits", default="test", help="comma-separated splits to score (default test)")
    sp.add_argument("--embed-dir", help="also export per-cell embeddings here")
    common(sp, feature=False)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("embed", help="export pre-classifier embeddings and separability")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--split", choices=["train", "val", "test"])
    common(sp, feature=False)
    sp.set_defaults(func=cmd_embed)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.workers < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except (UsageError, ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DegradationError, EvaluationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
