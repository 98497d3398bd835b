"""Shared data model: embeddings, trials, keys, scores and operating points.

All containers are frozen after construction and their numpy buffers are
marked read-only, so they can be shared between worker threads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for inconsistent or invalid in-memory data."""


def _frozen(a, dtype=np.float64) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


class Trial(NamedTuple):
    model_id: str
    segment_id: str


@dataclass(frozen=True)
class OperatingPoint:
    p_target: float
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.p_target < 1.0:
            raise DataError(f"p_target must be in (0, 1), got {self.p_target}")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise DataError("costs must be positive")

    @property
    def threshold(self) -> float:
        """Bayes decision threshold for calibrated LLRs."""
        return math.log((1.0 - self.p_target) * self.c_fa / (self.p_target * self.c_miss))

    @property
    def normalizer(self) -> float:
        return min(self.p_target * self.c_miss, (1.0 - self.p_target) * self.c_fa)


# The two SRE'20 operating points used for C_primary.
PRIMARY_OPERATING_POINTS = (OperatingPoint(0.01), OperatingPoint(0.005))


@dataclass(frozen=True)
class DurationInfo:
    reference_seconds: float
    probe_seconds: float

    def __post_init__(self):
        if not (self.reference_seconds > 0 and self.probe_seconds > 0):
            raise DataError("durations must be positive")


def frames(seconds):
    """Frame count at a 10 ms shift."""
    return np.rint(np.asarray(seconds, dtype=np.float64) * 100.0)


@dataclass(frozen=True)
class EmbeddingSet:
    """Named fixed-dimension vectors with optional per-segment metadata.

    ``vectors`` is an (n, dim) array whose rows follow ``ids``.  The optional
    maps are keyed by segment id.
    """

    ids: tuple
    vectors: np.ndarray
    labels: Mapping[str, str] | None = None
    domains: Mapping[str, str] | None = None
    durations: Mapping[str, float] | None = None
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ids = tuple(str(i) for i in self.ids)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim == 1 and len(ids) == 0:
            raise DataError("empty set needs a 2-D (0, dim) array")
        if vectors.ndim != 2 or vectors.shape[1] < 1:
            raise DataError("vectors must be a 2-D array with dim >= 1")
        if vectors.shape[0] != len(ids):
            raise DataError(f"{len(ids)} ids but {vectors.shape[0]} vectors")
        if not np.all(np.isfinite(vectors)):
            raise DataError("embedding components must be finite")
        index = {}
        for i, sid in enumerate(ids):
            if not sid:
                raise DataError("empty segment id")
            if sid in index:
                raise DataError(f"duplicate segment id {sid!r}")
            index[sid] = i
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "vectors", _frozen(vectors))
        object.__setattr__(self, "_index", index)
        for name in ("labels", "domains"):
            m = getattr(self, name)
            if m is not None:
                m = {str(k): str(v) for k, v in m.items()}
                missing = [s for s in ids if s not in m]
                if missing:
                    raise DataError(f"{name} missing for segment {missing[0]!r}")
                object.__setattr__(self, name, {s: m[s] for s in ids})
        if self.durations is not None:
            d = {str(k): float(v) for k, v in self.durations.items()}
            missing = [s for s in ids if s not in d]
            if missing:
                raise DataError(f"durations missing for segment {missing[0]!r}")
            bad = [s for s in ids if not (d[s] > 0 and math.isfinite(d[s]))]
            if bad:
                raise DataError(f"nonpositive duration for segment {bad[0]!r}")
            object.__setattr__(self, "durations", {s: d[s] for s in ids})

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.ids)

    def __contains__(self, sid):
        return sid in self._index

    def index_of(self, sid: str) -> int:
        try:
            return self._index[sid]
        except KeyError:
            raise DataError(f"unknown segment id {sid!r}") from None

    def vector(self, sid: str) -> np.ndarray:
        return self.vectors[self.index_of(sid)]

    def label_array(self) -> np.ndarray:
        if self.labels is None:
            raise DataError("embedding set has no speaker labels")
        return np.array([self.labels[s] for s in self.ids], dtype=object)

    def duration_array(self) -> np.ndarray:
        if self.durations is None:
            raise DataError("embedding set has no durations")
        return np.array([self.durations[s] for s in self.ids], dtype=np.float64)

    def with_vectors(self, vectors) -> "EmbeddingSet":
        """Same ids and metadata, new vectors (any dim)."""
        return EmbeddingSet(self.ids, vectors, self.labels, self.domains, self.durations)

    def subset(self, ids: Iterable[str]) -> "EmbeddingSet":
        ids = list(ids)
        rows = [self.index_of(s) for s in ids]

        def sub(m):
            return None if m is None else {s: m[s] for s in ids}

        return EmbeddingSet(ids, self.vectors[rows].reshape(len(ids), self.dim),
                            sub(self.labels), sub(self.domains), sub(self.durations))


@dataclass(frozen=True)
class TrialList:
    model_ids: tuple
    segment_ids: tuple

    def __post_init__(self):
        m = tuple(str(x) for x in self.model_ids)
        s = tuple(str(x) for x in self.segment_ids)
        if len(m) != len(s):
            raise DataError("model and segment id columns differ in length")
        for a, b in zip(m, s):
            if not a or not b:
                raise DataError("trial identifiers must be nonempty")
        object.__setattr__(self, "model_ids", m)
        object.__setattr__(self, "segment_ids", s)

    @classmethod
    def from_pairs(cls, pairs: Iterable[Sequence[str]]) -> "TrialList":
        pairs = list(pairs)
        return cls(tuple(p[0] for p in pairs), tuple(p[1] for p in pairs))

    def __len__(self):
        return len(self.model_ids)

    def __iter__(self):
        return (Trial(m, s) for m, s in zip(self.model_ids, self.segment_ids))

    def __getitem__(self, i) -> Trial:
        return Trial(self.model_ids[i], self.segment_ids[i])

    def take(self, idx) -> "TrialList":
        return TrialList(tuple(self.model_ids[i] for i in idx),
                         tuple(self.segment_ids[i] for i in idx))


@dataclass(frozen=True)
class TrialKey:
    trials: TrialList
    is_target: np.ndarray
    partitions: tuple | None = None

    def __post_init__(self):
        lab = np.asarray(self.is_target, dtype=bool).reshape(-1)
        if lab.shape[0] != len(self.trials):
            raise DataError(f"{lab.shape[0]} labels for {len(self.trials)} trials")
        object.__setattr__(self, "is_target", _frozen(lab, bool))
        if self.partitions is not None:
            p = tuple(str(x) for x in self.partitions)
            if len(p) != len(self.trials):
                raise DataError("partition count differs from trial count")
            object.__setattr__(self, "partitions", p)

    def __len__(self):
        return len(self.trials)

    @property
    def n_target(self) -> int:
        return int(self.is_target.sum())

    @property
    def n_nontarget(self) -> int:
        return len(self) - self.n_target

    def take(self, idx) -> "TrialKey":
        idx = np.asarray(idx, dtype=np.intp)
        parts = None if self.partitions is None else tuple(self.partitions[i] for i in idx)
        return TrialKey(self.trials.take(idx), self.is_target[idx], parts)


@dataclass(frozen=True)
class ScoreSet:
    trials: TrialList
    scores: np.ndarray
    name: str = ""

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if s.shape[0] != len(self.trials):
            raise DataError(f"{s.shape[0]} scores for {len(self.trials)} trials")
        if not np.all(np.isfinite(s)):
            bad = int(np.flatnonzero(~np.isfinite(s))[0])
            raise DataError(f"non-finite score at trial {self.trials[bad]}")
        object.__setattr__(self, "scores", _frozen(s))

    def __len__(self):
        return len(self.trials)

    def with_scores(self, scores) -> "ScoreSet":
        return ScoreSet(self.trials, scores, self.name)


def align(score_sets: Sequence[ScoreSet], key: TrialKey | TrialList) -> np.ndarray:
    """Stack score sets into an (n_subsystems, n_trials) matrix in key order."""
    trials = key.trials if isinstance(key, TrialKey) else key
    out = np.empty((len(score_sets), len(trials)))
    for row, ss in enumerate(score_sets):
        lookup = {}
        for i, t in enumerate(ss.trials):
            lookup.setdefault(t, i)
        idx = np.empty(len(trials), dtype=np.intp)
        for j, t in enumerate(trials):
            i = lookup.get(t)
            if i is None:
                name = ss.name or f"#{row}"
                raise DataError(
                    f"subsystem {name} has no score for trial ({t.model_id}, {t.segment_id})")
            idx[j] = i
        out[row] = ss.scores[idx]
    out.setflags(write=False)
    return out


def single_segment_manifest(model_ids: Iterable[str]) -> dict:
    return {m: [m] for m in model_ids}


def reference_durations(trials: TrialList, durations: Mapping[str, float],
                        manifest: Mapping[str, Sequence[str]] | None = None) -> np.ndarray:
    """Per-trial enrollment duration, summed over enrollment segments."""
    cache = {}
    out = np.empty(len(trials))
    for i, m in enumerate(trials.model_ids):
        if m not in cache:
            segs = manifest[m] if manifest is not None and m in manifest else [m]
            try:
                cache[m] = float(sum(durations[s] for s in segs))
            except KeyError as e:
                raise DataError(f"no duration for segment {e.args[0]!r} of model {m!r}") from None
        out[i] = cache[m]
    return out


def probe_durations(trials: TrialList, durations: Mapping[str, float]) -> np.ndarray:
    try:
        return np.array([durations[s] for s in trials.segment_ids], dtype=np.float64)
    except KeyError as e:
        raise DataError(f"no duration for segment {e.args[0]!r}") from None
