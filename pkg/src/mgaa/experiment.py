"""Desk-scale end-to-end run: synthetic corpus, hermetic degradation matrix,
training on degraded audio, per-condition evaluation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .degrade import HERMETIC_CODECS, STANDARD_PLRS, CodecManifest, degrade
from .evaluation import ConditionMatrix, EvaluationReport, Utterance, build_conditions, evaluate, utterance_seed
from .features import FeatureKind, extract_batch
from .model import ABLATIONS, ModelConfig, ablation_config
from .synthetic import make_corpus
from .train import TrainConfig, TrainResult, train

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    n_real: int = 500
    n_fake: int = 500
    test_fraction: float = 0.3
    feature: FeatureKind = FeatureKind.LFCC
    codecs: Sequence = HERMETIC_CODECS
    plrs: Sequence[float] = STANDARD_PLRS
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


@dataclass
class ExperimentResult:
    report: EvaluationReport
    training: TrainResult
    matrix: ConditionMatrix
    timings: Dict[str, float]


def degrade_for_training(
    segments: Sequence, matrix: ConditionMatrix, seed: int, manifest: Optional[CodecManifest] = None
) -> List:
    """Assign each training segment one matrix cell, round robin over a seeded shuffle.

    The clean cell is part of the rotation, so the training pool mixes clean
    audio with every codec and loss-rate combination.
    """
    rng = np.random.default_rng(seed)
    cells = matrix.cells
    order = rng.permutation(len(segments))
    out = list(segments)
    for rank, i in enumerate(order):
        ci = rank % len(cells)
        spec = matrix.spec_for(cells[ci], utterance_seed(seed + 7919, ci, int(i)))
        if spec is not None:
            out[i] = degrade(segments[i], spec, manifest)
    return out


def run_experiment(cfg: ExperimentConfig, progress: Callable[[str], None] = log.info) -> ExperimentResult:
    timings: Dict[str, float] = {}
    t0 = time.time()
    segs, labels = make_corpus(cfg.n_real, cfg.n_fake, cfg.seed)
    n_test = int(round(len(segs) * cfg.test_fraction))
    test_segs, test_y = segs[:n_test], labels[:n_test]
    pool_segs, pool_y = segs[n_test:], labels[n_test:]
    timings["corpus"] = time.time() - t0
    progress(f"corpus: {len(pool_segs)} train/val, {n_test} test ({timings['corpus']:.1f}s)")

    t = time.time()
    matrix = ConditionMatrix.build(cfg.codecs, cfg.plrs)
    x_pool = extract_batch(degrade_for_training(pool_segs, matrix, cfg.seed), cfg.feature)
    timings["train_features"] = time.time() - t

    t = time.time()
    result = train(x_pool, pool_y, cfg.model, cfg.train)
    timings["train"] = time.time() - t
    for r in result.history:
        progress(f"epoch {r.epoch}: train {r.train_loss:.4f} val {r.val_loss:.4f} val EER {r.val_eer:.4f} ({r.seconds:.1f}s)")

    t = time.time()
    corpus = [Utterance(f"utt{i:04d}", s, int(y)) for i, (s, y) in enumerate(zip(test_segs, test_y))]
    degraded = build_conditions(corpus, matrix, seed=cfg.seed + 1)
    cell_data: Dict[str, Tuple[np.ndarray, np.ndarray]] = {
        key: (extract_batch([u.segment for u in utts], cfg.feature), np.array([u.label for u in utts]))
        for key, utts in degraded.items()
    }
    timings["test_features"] = time.time() - t

    t = time.time()
    net = result.net
    report = evaluate(lambda x: net.scores(x, 128), cell_data, matrix)
    timings["evaluate"] = time.time() - t
    timings["total"] = time.time() - t0
    progress(f"evaluation done ({timings['evaluate']:.1f}s); total {timings['total']:.1f}s")
    return ExperimentResult(report, result, matrix, timings)


def toy_features(n: int = 32, seed: int = 0, feature=FeatureKind.LFCC) -> Tuple[np.ndarray, np.ndarray]:
    """Small clean synthetic feature set for quick training smoke runs."""
    segs, y = make_corpus(n // 2, n - n // 2, seed)
    return extract_batch(segs, feature), y


def run_ablations(
    x: np.ndarray,
    y: np.ndarray,
    letters: Sequence[str] = tuple(ABLATIONS),
    train_cfg: Optional[TrainConfig] = None,
) -> Dict[str, Tuple[int, TrainResult]]:
    """Train every ablation variant briefly; returns ``{letter: (n_params, result)}``."""
    train_cfg = train_cfg or TrainConfig(batch_size=16, max_epochs=1, early_stop_patience=1)
    out = {}
    for letter in letters:
        cfg = ablation_config(letter)
        res = train(x, y, cfg, train_cfg)
        out[letter] = (res.net.n_params, res)
    return out
