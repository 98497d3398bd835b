import numpy as np
import pytest

from svback.core import DataError, EmbeddingSet, ScoreSet, TrialList
from svback.plda import PldaModel, PldaScorer
from svback.scoring import (CosineScorer, adaptive_snorm, cal_norm, cohort_score_lists,
                            norm_stats, score_cosine, score_trials, top_k)


def _raw(scores):
    tr = TrialList.from_pairs([(f"m{i}", f"s{i}") for i in range(len(scores))])
    return ScoreSet(tr, scores)


def _lists(raw, e_list, t_list):
    return ({m: e_list for m in raw.trials.model_ids}, {s: t_list for s in raw.trials.segment_ids})


class TestCosine:
    def test_values(self):
        assert score_cosine([1.0, 2.0], [1.0, 2.0]) == pytest.approx(1.0)
        assert score_cosine([1.0, 0.0], [0.0, 3.0]) == 0.0
        assert score_cosine([1.0, -2.0], [-1.0, 2.0]) == pytest.approx(-1.0)

    def test_scale_invariant(self, rng):
        e, t = rng.standard_normal(5), rng.standard_normal(5)
        assert score_cosine(3 * e, 0.1 * t) == pytest.approx(score_cosine(e, t), abs=1e-15)

    def test_zero(self):
        with pytest.raises(DataError):
            score_cosine([0.0, 0.0], [1.0, 0.0])


class TestScoreTrials:
    def _setup(self, rng, n=300, d=4):
        ids = [f"x{i}" for i in range(n)]
        es = EmbeddingSet(ids, rng.standard_normal((n, d)), durations={i: 1.0 for i in ids})
        a, b = rng.integers(0, n, 5000), rng.integers(0, n, 5000)
        return es, TrialList(tuple(ids[i] for i in a), tuple(ids[i] for i in b))

    def test_matches_pairwise(self, rng):
        es, tr = self._setup(rng)
        m = PldaModel(np.zeros(4), np.eye(4), 0.5 * np.eye(4))
        sc = PldaScorer(m)
        got = score_trials(sc, tr, es, threads=1).scores
        ref = [sc.score(es.vector(a), es.vector(b)) for a, b in list(tr)[:200]]
        np.testing.assert_allclose(got[:200], ref, rtol=1e-12, atol=1e-12)

    def test_thread_count_irrelevant(self, rng, monkeypatch):
        import svback.scoring as scoring
        monkeypatch.setattr(scoring, "CHUNK", 128)
        es, tr = self._setup(rng)
        sc = PldaScorer(PldaModel(np.zeros(4), np.eye(4), np.eye(4)))
        one = score_trials(sc, tr, es, threads=1).scores
        for n in (2, 3, 8):
            np.testing.assert_array_equal(score_trials(sc, tr, es, threads=n).scores, one)

    def test_manifest_averages(self, rng):
        es, _ = self._setup(rng, n=5)
        tr = TrialList.from_pairs([("M", "x4")])
        got = score_trials(CosineScorer(), tr, es, manifest={"M": ["x0", "x1"]}).scores[0]
        assert got == pytest.approx(score_cosine(es.vectors[:2].mean(0), es.vectors[4]))

    def test_missing_embedding(self, rng):
        es, _ = self._setup(rng, n=3)
        with pytest.raises(DataError, match="nope"):
            score_trials(CosineScorer(), TrialList.from_pairs([("x0", "nope")]), es)


class TestNormStats:
    def test_top_k(self):
        assert top_k(10, 0.3) == 3
        assert top_k(11, 0.3) == 4
        assert top_k(3, 0.01) == 1

    def test_selects_highest(self):
        st = norm_stats([5.0, 1.0, 4.0, 0.0], 0.5)
        assert st.mean == 4.5 and st.std == 0.5

    def test_bad_fraction(self):
        with pytest.raises(DataError):
            norm_stats([1.0, 2.0], 0.0)


class TestSnorm:
    def test_identity_when_standard(self):
        raw = _raw([0.3, -1.2, 2.0])
        out = adaptive_snorm(raw, *_lists(raw, [1.0, -1.0], [1.0, -1.0]), top_fraction=1.0)
        np.testing.assert_allclose(out.scores, raw.scores)

    def test_degenerate_cohort(self):
        raw = _raw([1.0])
        with pytest.raises(DataError, match=r"\(m0, s0\)"):
            adaptive_snorm(raw, *_lists(raw, [0, 0, 10, 10], [0, 0, 10, 10]), top_fraction=0.5)

    def test_arithmetic(self):
        raw = _raw([5.0])
        out = adaptive_snorm(raw, *_lists(raw, [3.0, -1.0], [3.0, -1.0]), top_fraction=1.0)
        assert out.scores[0] == pytest.approx(2.0)

    def test_order_invariant(self, rng):
        raw = _raw(rng.standard_normal(4))
        c = rng.standard_normal(40)
        a = adaptive_snorm(raw, *_lists(raw, c, c[::-1]))
        b = adaptive_snorm(raw, *_lists(raw, rng.permutation(c), c))
        np.testing.assert_allclose(a.scores, b.scores, rtol=1e-12)

    def test_duplication_invariant(self, rng):
        # with fraction * n integral the selected set doubles exactly
        raw = _raw(rng.standard_normal(4))
        c = rng.standard_normal(40)
        a = adaptive_snorm(raw, *_lists(raw, c, c), top_fraction=0.3)
        c2 = np.concatenate([c, c])
        b = adaptive_snorm(raw, *_lists(raw, c2, c2), top_fraction=0.3)
        np.testing.assert_allclose(a.scores, b.scores, rtol=1e-12)

    def test_missing_list(self):
        raw = _raw([1.0])
        with pytest.raises(DataError, match="m0"):
            adaptive_snorm(raw, {}, {"s0": [1.0, 2.0]})


class TestCalNorm:
    def test_identity(self, rng):
        raw = _raw(rng.standard_normal(3))
        out = cal_norm(raw, *_lists(raw, [1.0, 2.0], [5.0, 0.0]), top_fraction=1.0, a=0.0, b=0.0)
        np.testing.assert_array_equal(out.scores, raw.scores)

    def test_mean_only(self):
        raw = _raw([10.0])
        out = cal_norm(raw, *_lists(raw, [4.0, 2.0], [4.0, 2.0]), top_fraction=1.0, a=1.0, b=0.0)
        assert out.scores[0] == pytest.approx(7.0)

    def test_std_only(self):
        raw = _raw([10.0])
        out = cal_norm(raw, *_lists(raw, [2.0, -2.0], [2.0, -2.0]), top_fraction=1.0, a=0.0, b=1.0)
        assert out.scores[0] == pytest.approx(8.0)


class TestCohortLists:
    def test_shapes_and_values(self, rng):
        ids = [f"x{i}" for i in range(6)]
        es = EmbeddingSet(ids, rng.standard_normal((6, 3)))
        coh = EmbeddingSet([f"c{i}" for i in range(4)], rng.standard_normal((4, 3)))
        tr = TrialList.from_pairs([("x0", "x1"), ("x0", "x2"), ("x3", "x1")])
        e_lists, t_lists = cohort_score_lists(CosineScorer(), tr, es, coh)
        assert set(e_lists) == {"x0", "x3"} and set(t_lists) == {"x1", "x2"}
        assert e_lists["x0"][2] == pytest.approx(score_cosine(es.vectors[0], coh.vectors[2]))

    def test_chunked_rows(self, rng, monkeypatch):
        import svback.scoring as scoring
        ids = [f"x{i}" for i in range(50)]
        es = EmbeddingSet(ids, rng.standard_normal((50, 3)))
        coh = EmbeddingSet([f"c{i}" for i in range(7)], rng.standard_normal((7, 3)))
        tr = TrialList(tuple(ids[:25]), tuple(ids[25:]))
        sc = PldaScorer(PldaModel(np.zeros(3), np.eye(3), np.eye(3)))
        full = cohort_score_lists(sc, tr, es, coh)
        monkeypatch.setattr(scoring, "CHUNK", 10)
        small = cohort_score_lists(sc, tr, es, coh)
        for a, b in zip(full, small):
            for k in a:
                np.testing.assert_array_equal(a[k], b[k])
