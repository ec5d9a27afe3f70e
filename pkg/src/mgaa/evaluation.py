"""EER scoring, C0-C5 condition matrices and per-condition reports."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial.distance import cdist

from .degrade import (
    HERMETIC_CODECS,
    FULL_CODECS,
    STANDARD_PLRS,
    CodecId,
    CodecManifest,
    DegradationError,
    DegradationSpec,
    LossModel,
    degrade,
)
from .features import AudioSegment


class EvaluationError(ValueError):
    pass


@dataclass
class ScoreSet:
    """Detection scores (higher = more likely fake) and labels (0 real, 1 fake)."""

    scores: np.ndarray
    labels: np.ndarray
    condition_tag: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64).ravel()
        self.labels = np.asarray(self.labels).ravel().astype(np.int64)
        if self.scores.size != self.labels.size or self.scores.size == 0:
            raise EvaluationError("scores and labels must be non-empty and of equal length")
        if not np.isin(self.labels, (0, 1)).all():
            raise EvaluationError("labels must be 0 (real) or 1 (fake)")

    @property
    def n_real(self) -> int:
        return int((self.labels == 0).sum())

    @property
    def n_fake(self) -> int:
        return int((self.labels == 1).sum())


def det_curve(real: np.ndarray, fake: np.ndarray):
    """(thresholds, far, frr) over midpoints between distinct scores.

    A sample is called fake when its score exceeds the threshold, so
    FAR(t) = P(fake <= t) (fake accepted as real) rises with t and
    FRR(t) = P(real > t) falls. The end thresholds sit one unit outside the
    score range.
    """
    u = np.unique(np.concatenate([real, fake]))
    thr = np.concatenate(([u[0] - 1.0], (u[:-1] + u[1:]) / 2.0, [u[-1] + 1.0]))
    far = np.searchsorted(np.sort(fake), thr, side="right") / fake.size
    frr = 1.0 - np.searchsorted(np.sort(real), thr, side="right") / real.size
    return thr, far, frr


def eer(s: ScoreSet) -> Tuple[float, float]:
    """Equal error rate and the (interpolated) threshold where FAR = FRR."""
    real = s.scores[s.labels == 0]
    fake = s.scores[s.labels == 1]
    if real.size == 0 or fake.size == 0:
        raise EvaluationError("EER needs both real and fake samples")
    thr, far, frr = det_curve(real, fake)
    d = far - frr
    i = int(np.argmax(d >= 0))  # d[0] = -1, d[-1] = 1
    if d[i] == 0:
        return float(far[i]), float(thr[i])
    a = -d[i - 1] / (d[i] - d[i - 1])
    rate = far[i - 1] + a * (far[i] - far[i - 1])
    return float(rate), float(thr[i - 1] + a * (thr[i] - thr[i - 1]))


def separability(embeddings: np.ndarray, labels: np.ndarray) -> Dict[str, float]:
    """Mean silhouette (Euclidean) and a trace Fisher ratio for two-class embeddings."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels).ravel()
    classes = np.unique(y)
    if classes.size < 2:
        raise EvaluationError("separability needs two classes")
    counts = np.array([(y == c).sum() for c in classes])
    if counts.min() < 2:
        raise EvaluationError("separability needs at least two samples per class")
    dist = cdist(x, x)
    sil = np.empty(len(x))
    for c in classes:
        own = y == c
        a = dist[np.ix_(own, own)].sum(axis=1) / (own.sum() - 1)
        b = np.min([dist[np.ix_(own, y == o)].mean(axis=1) for o in classes if o != c], axis=0)
        sil[own] = (b - a) / np.maximum(a, b)
    mu = x.mean(axis=0)
    between = sum(n * np.sum((x[y == c].mean(axis=0) - mu) ** 2) for c, n in zip(classes, counts))
    within = sum(np.sum((x[y == c] - x[y == c].mean(axis=0)) ** 2) for c in classes)
    fisher = between / within if within > 0 else math.inf
    return {"silhouette": float(sil.mean()), "fisher_ratio": float(fisher)}


# ---------------------------------------------------------------------------
# condition matrix


@dataclass(frozen=True)
class ConditionCell:
    condition: str  # "C0".."C5"
    codec: Optional[CodecId]  # None for clean
    plr: Optional[float]

    @property
    def key(self) -> str:
        return "C0/CLEAN" if self.codec is None else f"{self.condition}/{self.codec.value}"

    @property
    def codec_name(self) -> str:
        return "CLEAN" if self.codec is None else self.codec.value


@dataclass
class ConditionMatrix:
    cells: List[ConditionCell]
    loss_model: LossModel = field(default_factory=LossModel)
    counts: Dict[str, int] = field(default_factory=dict)
    skipped: Dict[str, str] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        codecs: Sequence = FULL_CODECS,
        plrs: Sequence[float] = STANDARD_PLRS,
        loss_model: Optional[LossModel] = None,
    ) -> "ConditionMatrix":
        """C0 (clean) plus C1..Cn, one per PLR, each crossed with every codec."""
        cells = [ConditionCell("C0", None, None)]
        for i, plr in enumerate(plrs, start=1):
            for c in codecs:
                cells.append(ConditionCell(f"C{i}", CodecId.parse(c), float(plr)))
        return cls(cells, loss_model or LossModel())

    @classmethod
    def full(cls) -> "ConditionMatrix":
        return cls.build(FULL_CODECS, STANDARD_PLRS)

    @classmethod
    def hermetic(cls) -> "ConditionMatrix":
        return cls.build(HERMETIC_CODECS, STANDARD_PLRS)

    @property
    def conditions(self) -> List[str]:
        return sorted({c.condition for c in self.cells}, key=lambda s: int(s[1:]))

    @property
    def degradation_cells(self) -> List[ConditionCell]:
        return [c for c in self.cells if c.codec is not None]

    def cell(self, key: str) -> ConditionCell:
        for c in self.cells:
            if c.key == key:
                return c
        raise KeyError(key)

    def spec_for(self, cell: ConditionCell, seed: int) -> Optional[DegradationSpec]:
        if cell.codec is None:
            return None
        return DegradationSpec(cell.codec, cell.plr, self.loss_model, seed=seed)


def utterance_seed(base_seed: int, cell_index: int, utt_index: int) -> int:
    """Independent per-(cell, utterance) seed so loss patterns never depend on audio."""
    return int(np.random.SeedSequence([base_seed, cell_index, utt_index]).generate_state(1)[0])


@dataclass
class Utterance:
    uid: str
    segment: AudioSegment
    label: int  # 0 real, 1 fake


def build_conditions(
    corpus: Sequence[Utterance],
    matrix: ConditionMatrix,
    manifest: Optional[CodecManifest] = None,
    seed: int = 0,
    on_item: Optional[Callable[[ConditionCell, Utterance], None]] = None,
) -> Dict[str, List[Utterance]]:
    """Degrade every utterance under every cell.

    Returns ``{cell.key: [Utterance, ...]}``; C0 holds the clean originals.
    Cells whose codec tools are unavailable are recorded in
    ``matrix.skipped`` and left out of the result.
    """
    if not corpus:
        raise EvaluationError("empty corpus")
    out: Dict[str, List[Utterance]] = {}
    for ci, cell in enumerate(matrix.cells):
        if cell.codec is None:
            out[cell.key] = list(corpus)
            matrix.counts[cell.key] = len(corpus)
            continue
        if cell.codec not in HERMETIC_CODECS and (manifest is None or not manifest.available(cell.codec)):
            missing = manifest.missing_tools(cell.codec) if manifest is not None else ["<no codec manifest>"]
            matrix.skipped[cell.key] = f"codec tools unavailable: {', '.join(missing)}"
            matrix.counts[cell.key] = 0
            continue
        items = []
        try:
            for ui, utt in enumerate(corpus):
                spec = matrix.spec_for(cell, utterance_seed(seed, ci, ui))
                items.append(Utterance(utt.uid, degrade(utt.segment, spec, manifest), utt.label))
                if on_item is not None:
                    on_item(cell, items[-1])
        except DegradationError as exc:
            matrix.skipped[cell.key] = str(exc).splitlines()[0]
            matrix.counts[cell.key] = 0
            continue
        out[cell.key] = items
        matrix.counts[cell.key] = len(items)
    return out


# ---------------------------------------------------------------------------
# reports

REPORT_COLUMNS = ("condition", "codec", "plr", "n_real", "n_fake", "eer", "threshold")


@dataclass
class ReportRow:
    condition: str
    codec: str
    plr: Optional[float]
    n_real: int
    n_fake: int
    eer: Optional[float]
    threshold: Optional[float]

    def as_csv(self) -> List[str]:
        def fmt(v):
            if v is None:
                return "N/A"
            return f"{v:.6g}" if isinstance(v, float) else str(v)

        return [self.condition, self.codec, fmt(self.plr), str(self.n_real), str(self.n_fake), fmt(self.eer), fmt(self.threshold)]


@dataclass
class EvaluationReport:
    cell_rows: List[ReportRow]
    condition_rows: List[ReportRow]
    average: Optional[float]
    embeddings: Dict[str, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def condition_eers(self) -> Dict[str, Optional[float]]:
        return {r.condition: r.eer for r in self.condition_rows}

    def table(self) -> Dict[str, Optional[float]]:
        """Table-1 style row: C0 .. Cn then Avg."""
        t = self.condition_eers()
        t["Avg"] = self.average
        return t

    def monotone_trend(self) -> bool:
        """Whether pooled EER is non-decreasing from C1 to the last condition."""
        vals = [r.eer for r in self.condition_rows if r.condition != "C0" and r.eer is not None]
        return all(a <= b for a, b in zip(vals, vals[1:]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.cell_rows + self.condition_rows:
            w.writerow(r.as_csv())
        n_real = sum(r.n_real for r in self.condition_rows)
        n_fake = sum(r.n_fake for r in self.condition_rows)
        w.writerow(ReportRow("Avg", "ALL", None, n_real, n_fake, self.average, None).as_csv())
        return buf.getvalue()

    def write_csv(self, path) -> None:
        from .formats import atomic_write_text

        atomic_write_text(path, self.to_csv())


def _row(condition, codec, plr, scores, labels) -> ReportRow:
    labels = np.asarray(labels)
    n_real, n_fake = int((labels == 0).sum()), int((labels == 1).sum())
    if n_real == 0 or n_fake == 0:
        return ReportRow(condition, codec, plr, n_real, n_fake, None, None)
    e, t = eer(ScoreSet(scores, labels, f"{condition}/{codec}"))
    return ReportRow(condition, codec, plr, n_real, n_fake, e, t)


def evaluate(
    score_fn: Callable[[np.ndarray], np.ndarray],
    cell_data: Dict[str, Tuple[np.ndarray, np.ndarray]],
    matrix: ConditionMatrix,
    embed_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> EvaluationReport:
    """Score every cell and pool cells of the same condition.

    ``cell_data`` maps cell keys to ``(features, labels)``; missing or empty
    cells are reported as N/A and left out of the macro average.
    ``score_fn`` maps a feature batch to fake-class scores.
    """
    cell_rows: List[ReportRow] = []
    pooled: Dict[str, List[Tuple[np.ndarray, np.ndarray]]] = {c: [] for c in matrix.conditions}
    plr_of: Dict[str, Optional[float]] = {}
    embeddings = {}
    for cell in matrix.cells:
        plr_of[cell.condition] = cell.plr
        data = cell_data.get(cell.key)
        if data is None or len(data[1]) == 0:
            cell_rows.append(ReportRow(cell.condition, cell.codec_name, cell.plr, 0, 0, None, None))
            continue
        x, y = data
        s = np.asarray(score_fn(x), dtype=np.float64)
        cell_rows.append(_row(cell.condition, cell.codec_name, cell.plr, s, y))
        pooled[cell.condition].append((s, np.asarray(y)))
        if embed_fn is not None:
            embeddings[cell.key] = (embed_fn(x), np.asarray(y))
    cond_rows = []
    for cond in matrix.conditions:
        parts = pooled[cond]
        if not parts:
            cond_rows.append(ReportRow(cond, "ALL", plr_of[cond], 0, 0, None, None))
            continue
        s = np.concatenate([p[0] for p in parts])
        y = np.concatenate([p[1] for p in parts])
        cond_rows.append(_row(cond, "ALL", plr_of[cond], s, y))
    valid = [r.eer for r in cond_rows if r.eer is not None]
    avg = float(np.mean(valid)) if valid else None
    return EvaluationReport(cell_rows, cond_rows, avg, embeddings)
