import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from svback.core import EmbeddingSet, ScoreSet, TrialKey, TrialList
from svback.formats import (FileFormatError, parse_durations, parse_key, parse_manifest,
                            parse_trial_list, read_embeddings, read_scores, write_durations,
                            write_embeddings, write_key, write_manifest, write_scores,
                            write_trial_list)

# identifiers: nonempty, no field or line separators
ident = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\t\n\r"),
                min_size=1, max_size=12)
finite = st.floats(allow_nan=False, allow_infinity=False)
ROUND_TRIP = settings(max_examples=1000, deadline=None)


@st.composite
def trial_lists(draw, max_size=20):
    pairs = draw(st.lists(st.tuples(ident, ident), max_size=max_size))
    return TrialList.from_pairs(pairs)


@st.composite
def keys(draw):
    tr = draw(trial_lists())
    lab = draw(st.lists(st.booleans(), min_size=len(tr), max_size=len(tr)))
    parts = None
    if draw(st.booleans()):
        parts = tuple(draw(st.lists(ident, min_size=len(tr), max_size=len(tr))))
    return TrialKey(tr, np.array(lab, dtype=bool), parts)


@st.composite
def score_sets(draw):
    tr = draw(trial_lists())
    vals = draw(st.lists(finite, min_size=len(tr), max_size=len(tr)))
    return ScoreSet(tr, np.array(vals, dtype=np.float64))


@st.composite
def embedding_sets(draw):
    ids = draw(st.lists(ident, unique=True, max_size=8))
    dim = draw(st.integers(1, 5))
    vecs = np.array(draw(st.lists(finite, min_size=len(ids) * dim, max_size=len(ids) * dim)),
                    dtype=np.float64).reshape(len(ids), dim)
    labels = {i: draw(ident) for i in ids} if draw(st.booleans()) else None
    domains = {i: draw(ident) for i in ids} if draw(st.booleans()) else None
    durs = ({i: draw(st.floats(min_value=1e-300, max_value=1e300)) for i in ids}
            if draw(st.booleans()) else None)
    return EmbeddingSet(ids, vecs, labels, domains, durs)


def _bits(a):
    return np.ascontiguousarray(a, dtype="<f8").view("<u8")


def check_trial_list(tr):
    assert parse_trial_list(write_trial_list(tr)) == tr


def check_key(key):
    back = parse_key(write_key(key))
    assert back.trials == key.trials
    np.testing.assert_array_equal(back.is_target, key.is_target)
    assert back.partitions == key.partitions


def check_scores(ss):
    back = read_scores(write_scores(ss))
    assert back.trials == ss.trials
    np.testing.assert_array_equal(_bits(back.scores), _bits(ss.scores))


def check_durations(d):
    back = parse_durations(write_durations(d))
    assert back == d and list(back) == list(d)


def check_embeddings(es):
    data = write_embeddings(es)
    back = read_embeddings(data)
    assert back.ids == es.ids and back.dim == es.dim
    np.testing.assert_array_equal(_bits(back.vectors), _bits(es.vectors))
    assert (back.labels, back.domains, back.durations) == (es.labels, es.domains, es.durations)
    assert write_embeddings(back) == data


durations_maps = st.dictionaries(ident, st.floats(min_value=1e-300, max_value=1e300), max_size=20)

# (strategy, check) per format; also used by the acceptance suite
ROUND_TRIP_CASES = {
    "trial_list": (trial_lists(), check_trial_list),
    "key": (keys(), check_key),
    "scores": (score_sets(), check_scores),
    "durations": (durations_maps, check_durations),
    "embeddings": (embedding_sets(), check_embeddings),
}


class TestRoundTrips:
    @ROUND_TRIP
    @given(trial_lists())
    def test_trial_list(self, tr):
        check_trial_list(tr)

    @ROUND_TRIP
    @given(keys())
    def test_key(self, key):
        check_key(key)

    @ROUND_TRIP
    @given(score_sets())
    def test_scores(self, ss):
        check_scores(ss)

    @ROUND_TRIP
    @given(durations_maps)
    def test_durations(self, d):
        check_durations(d)

    @ROUND_TRIP
    @given(embedding_sets())
    def test_embeddings(self, es):
        check_embeddings(es)

    @settings(max_examples=200, deadline=None)
    @given(st.dictionaries(ident, st.lists(ident, min_size=1, max_size=4), max_size=10))
    def test_manifest(self, m):
        assert parse_manifest(write_manifest(m)) == m


class TestTrialList:
    def test_single(self):
        tr = parse_trial_list("modelid\tsegmentid\nm1\ts1\n")
        assert list(tr) == [("m1", "s1")]

    def test_header_only(self):
        assert len(parse_trial_list("modelid\tsegmentid\n")) == 0

    def test_one_column_line(self):
        with pytest.raises(FileFormatError) as e:
            parse_trial_list("modelid\tsegmentid\nm1\n", path="t.tsv")
        assert e.value.line == 2 and e.value.path == "t.tsv"

    def test_missing_header(self):
        with pytest.raises(FileFormatError) as e:
            parse_trial_list("m1\ts1\n")
        assert e.value.line == 1

    def test_duplicates_preserved(self):
        tr = parse_trial_list("modelid\tsegmentid\na\tb\na\tb\n")
        assert len(tr) == 2


class TestKey:
    H = "modelid\tsegmentid\ttargettype"

    def test_target(self):
        k = parse_key(self.H + "\nm1\ts1\ttarget\n")
        assert k.n_target == 1 and k.partitions is None

    def test_unknown_token(self):
        with pytest.raises(FileFormatError, match="unknown targettype 'tgt'"):
            parse_key(self.H + "\nm1\ts1\ttgt\n")

    def test_partition(self):
        k = parse_key(self.H + "\tpartition\nm1\ts1\tnontarget\tYUE\n")
        assert k.partitions == ("YUE",) and k.n_target == 0

    def test_partition_column_required_on_every_line(self):
        with pytest.raises(FileFormatError) as e:
            parse_key(self.H + "\tpartition\nm1\ts1\ttarget\n")
        assert e.value.line == 2


class TestScores:
    H = "modelid\tsegmentid\tLLR\n"

    def test_three_trials(self):
        ss = ScoreSet(TrialList.from_pairs([("a", "b"), ("c", "d"), ("e", "f")]),
                      [0.1234567, -3.0, 1e-7])
        back = read_scores(write_scores(ss))
        assert back.trials == ss.trials
        np.testing.assert_allclose(back.scores, ss.scores, atol=1e-6)

    def test_nan_rejected(self):
        with pytest.raises(FileFormatError, match="non-finite"):
            read_scores(self.H + "a\tb\tNaN\n")

    def test_non_numeric(self):
        with pytest.raises(FileFormatError, match="non-numeric") as e:
            read_scores(self.H + "a\tb\t0.5\na\tc\tabc\n")
        assert e.value.line == 3

    def test_minus_two_exact(self):
        ss = ScoreSet(TrialList.from_pairs([("a", "b")]), [-2.0])
        text = write_scores(ss)
        assert text.endswith("a\tb\t-2.0\n")
        assert read_scores(text).scores[0] == -2.0


class TestDurations:
    H = "segmentid\tseconds\n"

    def test_value(self):
        assert parse_durations(self.H + "s1\t12.5\n") == {"s1": 12.5}

    @pytest.mark.parametrize("v", ["0", "-1", "abc", "inf"])
    def test_bad_values(self, v):
        with pytest.raises(FileFormatError):
            parse_durations(self.H + f"s1\t{v}\n")


class TestEmbeddings:
    def test_empty_is_12_bytes(self):
        data = write_embeddings(EmbeddingSet([], np.zeros((0, 4))))
        assert data == b"EMB1" + struct.pack("<II", 0, 4)
        assert len(read_embeddings(data)) == 0

    def test_one_record_bit_exact(self):
        v = np.array([[np.pi, -0.0, 5e-324]])
        back = read_embeddings(write_embeddings(EmbeddingSet(["x"], v)))
        np.testing.assert_array_equal(_bits(back.vectors), _bits(v))

    def test_layout(self):
        data = write_embeddings(EmbeddingSet(["ab"], [[1.0]]))
        assert data == b"EMB1" + struct.pack("<IIH", 1, 1, 2) + b"ab" + struct.pack("<d", 1.0)

    def test_bad_magic(self):
        with pytest.raises(FileFormatError, match="bad magic"):
            read_embeddings(b"EMB9" + struct.pack("<II", 0, 4))

    def test_truncated(self):
        data = write_embeddings(EmbeddingSet(["a", "b"], np.ones((2, 3))))
        with pytest.raises(FileFormatError, match="truncated"):
            read_embeddings(data[:-1])

    def test_duplicate_id(self):
        rec = struct.pack("<H", 1) + b"a" + struct.pack("<d", 0.0)
        with pytest.raises(FileFormatError, match="duplicate"):
            read_embeddings(b"EMB1" + struct.pack("<II", 2, 1) + rec + rec)

    def test_unknown_section(self):
        data = write_embeddings(EmbeddingSet(["a"], [[1.0]]))
        with pytest.raises(FileFormatError, match="section"):
            read_embeddings(data + b"XXXX" + struct.pack("<I", 0))
