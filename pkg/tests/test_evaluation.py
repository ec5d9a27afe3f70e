import math

import numpy as np
import pytest

from mgaa.degrade import HERMETIC_CODECS, FULL_CODECS, STANDARD_PLRS, CodecId, CodecManifest
from mgaa.evaluation import (
    REPORT_COLUMNS,
    ConditionMatrix,
    EvaluationError,
    ScoreSet,
    Utterance,
    build_conditions,
    eer,
    evaluate,
    separability,
)
from mgaa.features import AudioSegment


def sweep_oracle(real, fake):
    """Exhaustive sweep: count errors at every midpoint, interpolate the crossing."""
    pts = sorted(set(list(real) + list(fake)))
    cands = [pts[0] - 1.0] + [(pts[i] + pts[i + 1]) / 2 for i in range(len(pts) - 1)] + [pts[-1] + 1.0]
    rows = []
    for t in cands:
        far = sum(1 for s in fake if s <= t) / len(fake)
        frr = sum(1 for s in real if s > t) / len(real)
        rows.append((t, far, frr))
    for k in range(len(rows)):
        t, far, frr = rows[k]
        if far - frr >= 0:
            if far == frr:
                return far, t
            t0, far0, frr0 = rows[k - 1]
            d0, d1 = far0 - frr0, far - frr
            a = -d0 / (d1 - d0)
            return far0 + a * (far - far0), t0 + a * (t - t0)
    raise AssertionError("no crossing")


def split(s):
    return s.scores[s.labels == 0], s.scores[s.labels == 1]


def test_trivial_cases():
    assert eer(ScoreSet([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]))[0] == 0.0
    assert eer(ScoreSet([0.8, 0.9, 0.1, 0.2], [0, 0, 1, 1]))[0] == 1.0


def test_single_class_rejected():
    with pytest.raises(EvaluationError):
        eer(ScoreSet([0.1, 0.2], [0, 0]))
    with pytest.raises(EvaluationError):
        ScoreSet([0.1], [2])
    with pytest.raises(EvaluationError):
        ScoreSet([], [])


@pytest.mark.parametrize("seed", range(100))
def test_matches_sweep_oracle(seed):
    rng = np.random.default_rng(seed)
    n_r, n_f = rng.integers(5, 200, size=2)
    real = rng.uniform(0, 1, n_r)
    fake = rng.uniform(0.2, 1.2, n_f)
    if seed % 3 == 0:  # ties
        real, fake = np.round(real, 1), np.round(fake, 1)
    s = ScoreSet(np.concatenate([real, fake]), np.r_[np.zeros(n_r), np.ones(n_f)])
    got = eer(s)
    want = sweep_oracle(real, fake)
    assert abs(got[0] - want[0]) <= 1e-9
    assert abs(got[1] - want[1]) <= 1e-9


def test_200_uniform_per_class():
    rng = np.random.default_rng(7)
    real, fake = rng.uniform(size=200), rng.uniform(size=200)
    s = ScoreSet(np.r_[real, fake], np.r_[np.zeros(200), np.ones(200)])
    assert abs(eer(s)[0] - sweep_oracle(real, fake)[0]) <= 1e-9


@pytest.mark.parametrize("f", [lambda x: 3 * x + 1, np.exp, lambda x: x**3, lambda x: np.arctan(x)])
def test_monotone_invariance(f):
    rng = np.random.default_rng(1)
    scores = rng.normal(size=300) + np.r_[np.zeros(150), np.ones(150)]
    labels = np.r_[np.zeros(150), np.ones(150)]
    assert eer(ScoreSet(f(scores), labels))[0] == pytest.approx(eer(ScoreSet(scores, labels))[0], abs=1e-12)


def test_swap_labels_and_negate():
    rng = np.random.default_rng(2)
    scores = rng.normal(size=101) + np.r_[np.zeros(50), np.ones(51)]
    labels = np.r_[np.zeros(50), np.ones(51)].astype(int)
    assert eer(ScoreSet(-scores, 1 - labels))[0] == pytest.approx(eer(ScoreSet(scores, labels))[0], abs=1e-12)


def test_random_scorer_near_half():
    rng = np.random.default_rng(3)
    s = ScoreSet(rng.uniform(size=10_000), rng.integers(0, 2, 10_000))
    assert abs(eer(s)[0] - 0.5) < 0.05


def test_eer_bounds():
    rng = np.random.default_rng(4)
    for _ in range(50):
        n = rng.integers(2, 30)
        labels = np.r_[0, 1, rng.integers(0, 2, n)]
        e = eer(ScoreSet(rng.normal(size=n + 2), labels))[0]
        assert 0.0 <= e <= 1.0


# ---------------------------------------------------------------- separability


def naive_silhouette(x, y):
    n = len(x)
    vals = []
    for i in range(n):
        same = [np.linalg.norm(x[i] - x[j]) for j in range(n) if j != i and y[j] == y[i]]
        other = [np.linalg.norm(x[i] - x[j]) for j in range(n) if y[j] != y[i]]
        a, b = sum(same) / len(same), sum(other) / len(other)
        vals.append((b - a) / max(a, b))
    return sum(vals) / n


def test_silhouette_matches_naive():
    rng = np.random.default_rng(5)
    x = np.r_[rng.normal(size=(30, 2)), rng.normal(size=(25, 2)) + [4.0, 0.0]]
    y = np.r_[np.zeros(30), np.ones(25)]
    assert abs(separability(x, y)["silhouette"] - naive_silhouette(x, y)) <= 1e-9


def test_far_clusters_and_identical_distributions():
    rng = np.random.default_rng(6)
    x = np.r_[rng.normal(size=(40, 3)), rng.normal(size=(40, 3)) + 1000]
    y = np.r_[np.zeros(40), np.ones(40)]
    assert separability(x, y)["silhouette"] > 0.9
    same = rng.normal(size=(4000, 3))
    r = separability(same, rng.permutation(np.r_[np.zeros(2000), np.ones(2000)]))
    assert 0 <= r["fisher_ratio"] < 0.01
    assert -1 <= r["silhouette"] <= 1


def test_separability_rejects_degenerate():
    with pytest.raises(EvaluationError):
        separability(np.zeros((4, 2)), np.zeros(4))
    with pytest.raises(EvaluationError):
        separability(np.zeros((3, 2)), np.array([0, 0, 1]))


# ---------------------------------------------------------------- condition matrix


def test_full_matrix_has_31_cells():
    m = ConditionMatrix.full()
    assert len(m.degradation_cells) == 30
    assert len(m.cells) == 31
    assert m.conditions == ["C0", "C1", "C2", "C3", "C4", "C5"]
    assert m.cell("C0/CLEAN").codec is None
    c3 = [c for c in m.cells if c.condition == "C3"]
    assert {c.codec for c in c3} == set(FULL_CODECS) and {c.plr for c in c3} == {0.05}
    assert m.cell("C3/OPUS").plr == 0.05
    assert [m.cell(f"C{i + 1}/EVS").plr for i in range(5)] == list(STANDARD_PLRS)


def tiny_corpus(n=3):
    rng = np.random.default_rng(0)
    return [Utterance(f"u{i}", AudioSegment(rng.uniform(-0.3, 0.3, 64000)), i % 2) for i in range(n)]


def test_build_conditions_counts_and_skips():
    m = ConditionMatrix.full()
    out = build_conditions(tiny_corpus(3), m, CodecManifest(), seed=1)
    assert set(out) == {"C0/CLEAN"}
    assert len(m.skipped) == 30
    m = ConditionMatrix.build(HERMETIC_CODECS, STANDARD_PLRS)
    out = build_conditions(tiny_corpus(3), m, seed=1)
    assert len(out) == 11 and not m.skipped
    assert all(m.counts[k] == 3 for k in out)


def test_each_condition_holds_codecs_times_n(tmp_path):
    # six "codecs" (copy commands) -> every Ci holds 6N utterances
    text = "\n".join(f"{c.value} | cp {{in}} {{out}} | cp {{in}} {{out}} | x | 16000" for c in FULL_CODECS)
    manifest = CodecManifest.parse(text)
    m = ConditionMatrix.full()
    n = 2
    out = build_conditions(tiny_corpus(n), m, manifest, seed=0)
    assert not m.skipped
    for cond in ["C1", "C2", "C3", "C4", "C5"]:
        assert sum(len(v) for k, v in out.items() if k.startswith(cond + "/")) == 6 * n


def test_build_conditions_deterministic():
    m1 = ConditionMatrix.hermetic()
    m2 = ConditionMatrix.hermetic()
    a = build_conditions(tiny_corpus(2), m1, seed=4)
    b = build_conditions(tiny_corpus(2), m2, seed=4)
    for k in a:
        for u, v in zip(a[k], b[k]):
            np.testing.assert_array_equal(u.segment.samples, v.segment.samples)


def test_failing_codec_cell_is_skipped():
    manifest = CodecManifest.parse("OPUS | false {in} {out} | cp {in} {out} | x | 16000")
    m = ConditionMatrix.build([CodecId.OPUS], [0.0])
    out = build_conditions(tiny_corpus(2), m, manifest)
    assert "C1/OPUS" in m.skipped and "C1/OPUS" not in out


# ---------------------------------------------------------------- reports


def fake_cells(m, rng, n=40):
    data = {}
    for cell in m.cells:
        y = np.r_[np.zeros(n // 2), np.ones(n // 2)].astype(int)
        data[cell.key] = (rng.normal(size=(n, 1)) + y[:, None], y)
    return data


def test_report_structure_and_macro_average():
    m = ConditionMatrix.hermetic()
    rng = np.random.default_rng(0)
    rep = evaluate(lambda x: x[:, 0], fake_cells(m, rng), m)
    assert list(rep.table()) == ["C0", "C1", "C2", "C3", "C4", "C5", "Avg"]
    eers = [r.eer for r in rep.condition_rows]
    assert rep.average == pytest.approx(sum(eers) / len(eers))
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(REPORT_COLUMNS)
    assert len(lines) == 1 + 11 + 6 + 1
    assert lines[-1].startswith("Avg,")
    c3 = [r for r in rep.condition_rows if r.condition == "C3"][0]
    assert (c3.n_real, c3.n_fake) == (40, 40)


def test_pooled_condition_eer_is_pooled():
    m = ConditionMatrix.hermetic()
    rng = np.random.default_rng(1)
    data = fake_cells(m, rng)
    rep = evaluate(lambda x: x[:, 0], data, m)
    x1, y1 = data["C2/IDENTITY"]
    x2, y2 = data["C2/MULAW_STANDIN"]
    want = eer(ScoreSet(np.r_[x1[:, 0], x2[:, 0]], np.r_[y1, y2]))[0]
    assert rep.condition_eers()["C2"] == pytest.approx(want)


def test_identical_cells_identical_eers():
    m = ConditionMatrix.hermetic()
    rng = np.random.default_rng(2)
    data = fake_cells(m, rng)
    data["C4/MULAW_STANDIN"] = data["C4/IDENTITY"]
    rep = evaluate(lambda x: x[:, 0], data, m)
    rows = {(r.condition, r.codec): r.eer for r in rep.cell_rows}
    assert rows[("C4", "IDENTITY")] == rows[("C4", "MULAW_STANDIN")]


def test_empty_cells_are_na_and_excluded():
    m = ConditionMatrix.hermetic()
    rng = np.random.default_rng(3)
    data = fake_cells(m, rng)
    del data["C5/IDENTITY"], data["C5/MULAW_STANDIN"]
    rep = evaluate(lambda x: x[:, 0], data, m)
    assert rep.condition_eers()["C5"] is None
    others = [r.eer for r in rep.condition_rows if r.eer is not None]
    assert len(others) == 5 and rep.average == pytest.approx(np.mean(others))
    assert "N/A" in rep.to_csv()


def test_monotone_trend_flag():
    m = ConditionMatrix.build(HERMETIC_CODECS, [0.0, 0.5])
    y = np.r_[np.zeros(20), np.ones(20)].astype(int)
    good = np.r_[np.zeros(20), np.ones(20)][:, None]
    bad = np.r_[np.ones(20), np.zeros(20)][:, None]
    data = {"C0/CLEAN": (good, y), "C1/IDENTITY": (good, y), "C1/MULAW_STANDIN": (good, y),
            "C2/IDENTITY": (bad, y), "C2/MULAW_STANDIN": (bad, y)}
    assert evaluate(lambda x: x[:, 0], data, m).monotone_trend()
    data["C1/IDENTITY"], data["C2/IDENTITY"] = (bad, y), (good, y)
    data["C1/MULAW_STANDIN"], data["C2/MULAW_STANDIN"] = (bad, y), (good, y)
    assert not evaluate(lambda x: x[:, 0], data, m).monotone_trend()


def test_embeddings_exported_per_cell():
    m = ConditionMatrix.build(HERMETIC_CODECS, [0.0])
    rng = np.random.default_rng(4)
    data = fake_cells(m, rng, n=10)
    rep = evaluate(lambda x: x[:, 0], data, m, embed_fn=lambda x: np.c_[x, x])
    assert set(rep.embeddings) == set(data)
    assert rep.embeddings["C0/CLEAN"][0].shape == (10, 2)
