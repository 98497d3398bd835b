"""Trial scoring driver, cosine back-end, and cohort score normalization.

A scorer exposes ``prepare(vectors, seconds=None)`` returning per-vector
features and ``pair_scores(fe, ft, ie, it)`` scoring index pairs of those
features.  :func:`score_trials` splits the trial list into fixed-size chunks
so that the output does not depend on the number of worker threads.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import DataError, EmbeddingSet, ScoreSet, TrialList

CHUNK = 1 << 16


class CosineScorer:
    uses_durations = False

    def prepare(self, x, seconds=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise DataError("cosine scoring of a zero vector")
        return x / norms

    def pair_scores(self, fe, ft, ie, it):
        return np.clip(np.einsum("ij,ij->i", fe[ie], ft[it]), -1.0, 1.0)


def score_cosine(e, t) -> float:
    s = CosineScorer()
    return float(s.pair_scores(s.prepare(e), s.prepare(t), [0], [0])[0])


def default_threads() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:  # pragma: no cover
        return os.cpu_count() or 1


def _enrollment(trials: TrialList, es: EmbeddingSet, manifest):
    models = list(dict.fromkeys(trials.model_ids))
    vecs = np.empty((len(models), es.dim))
    secs = np.empty(len(models)) if es.durations is not None else None
    for i, m in enumerate(models):
        segs = manifest.get(m, [m]) if manifest else [m]
        if not segs:
            raise DataError(f"model {m!r} has no enrollment segments")
        rows = []
        for s in segs:
            if s not in es:
                raise DataError(f"enrollment segment {s!r} of model {m!r} has no embedding")
            rows.append(es.index_of(s))
        vecs[i] = es.vectors[rows].mean(axis=0)
        if secs is not None:
            secs[i] = sum(es.durations[s] for s in segs)
    return models, vecs, secs


def score_trials(scorer, trials: TrialList, embeddings: EmbeddingSet,
                 manifest: Mapping[str, Sequence[str]] | None = None,
                 probe_embeddings: EmbeddingSet | None = None,
                 threads: int | None = None, name: str = "") -> ScoreSet:
    """Score every trial; enrollment vectors of multi-segment models are averaged."""
    probes = probe_embeddings if probe_embeddings is not None else embeddings
    models, evecs, esecs = _enrollment(trials, embeddings, manifest)
    segs = list(dict.fromkeys(trials.segment_ids))
    for s in segs:
        if s not in probes:
            raise DataError(f"probe segment {s!r} has no embedding")
    prow = [probes.index_of(s) for s in segs]
    tvecs = probes.vectors[prow]
    use_dur = getattr(scorer, "uses_durations", False)
    if use_dur and (esecs is None or probes.durations is None):
        raise DataError("scorer needs durations but the embedding set has none")
    fe = scorer.prepare(evecs, esecs if use_dur else None)
    ft = scorer.prepare(tvecs, probes.duration_array()[prow] if use_dur else None)
    mpos = {m: i for i, m in enumerate(models)}
    spos = {s: i for i, s in enumerate(segs)}
    ie = np.fromiter((mpos[m] for m in trials.model_ids), dtype=np.intp, count=len(trials))
    it = np.fromiter((spos[s] for s in trials.segment_ids), dtype=np.intp, count=len(trials))
    out = np.empty(len(trials))

    def work(start):
        sl = slice(start, start + CHUNK)
        out[sl] = scorer.pair_scores(fe, ft, ie[sl], it[sl])

    starts = range(0, len(trials), CHUNK)
    n = threads or default_threads()
    if n <= 1 or len(starts) <= 1:
        for s in starts:
            work(s)
    else:
        with ThreadPoolExecutor(max_workers=n) as pool:
            list(pool.map(work, starts))
    return ScoreSet(trials, out, name)


def cohort_scores(scorer, vectors: np.ndarray, cohort: np.ndarray) -> np.ndarray:
    """Full (n_vectors, n_cohort) score matrix against a cohort set."""
    fv, fc = scorer.prepare(vectors), scorer.prepare(cohort)
    n, k = len(vectors), len(cohort)
    out = np.empty((n, k))
    rows = max(1, CHUNK // max(k, 1))
    it = np.tile(np.arange(k), rows)
    for start in range(0, n, rows):
        stop = min(n, start + rows)
        ie = np.repeat(np.arange(start, stop), k)
        out[start:stop] = scorer.pair_scores(fv, fc, ie, it[:ie.size]).reshape(stop - start, k)
    return out


def cohort_score_lists(scorer, trials: TrialList, embeddings: EmbeddingSet,
                       cohort: EmbeddingSet, manifest=None):
    """Cohort score lists for every model and probe segment in ``trials``."""
    models, evecs, _ = _enrollment(trials, embeddings, manifest)
    segs = list(dict.fromkeys(trials.segment_ids))
    tvecs = embeddings.vectors[[embeddings.index_of(s) for s in segs]].reshape(len(segs), embeddings.dim)
    em = cohort_scores(scorer, evecs, cohort.vectors)
    tm = cohort_scores(scorer, tvecs, cohort.vectors)
    return dict(zip(models, em)), dict(zip(segs, tm))


# -- adaptive S-norm and Cal-Norm ---------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float


def top_k(n: int, fraction: float) -> int:
    # tolerance keeps e.g. 0.3 * 10 from rounding up to 4
    return max(1, math.ceil(fraction * n - 1e-9))


def norm_stats(cohort_scores_, fraction: float) -> NormStats:
    """Mean and standard deviation of the top ``fraction`` of cohort scores."""
    if not 0.0 < fraction <= 1.0:
        raise DataError("top fraction must be in (0, 1]")
    c = np.asarray(cohort_scores_, dtype=np.float64).reshape(-1)
    if c.size == 0:
        raise DataError("empty cohort")
    k = top_k(c.size, fraction)
    order = np.argsort(-c, kind="stable")
    sel = c[order[:k]]
    return NormStats(float(sel.mean()), float(sel.std()))


def _side_stats(ids, lists, fraction, side):
    stats = {}
    for i in dict.fromkeys(ids):
        if i not in lists:
            raise DataError(f"no cohort scores for {side} {i!r}")
        stats[i] = norm_stats(lists[i], fraction)
    return stats


def _trial_stats(raw: ScoreSet, enroll_lists, probe_lists, fraction):
    es = _side_stats(raw.trials.model_ids, enroll_lists, fraction, "model")
    ts = _side_stats(raw.trials.segment_ids, probe_lists, fraction, "segment")
    mu_e = np.array([es[m].mean for m in raw.trials.model_ids])
    sd_e = np.array([es[m].std for m in raw.trials.model_ids])
    mu_t = np.array([ts[s].mean for s in raw.trials.segment_ids])
    sd_t = np.array([ts[s].std for s in raw.trials.segment_ids])
    bad = np.flatnonzero((sd_e <= 0) | (sd_t <= 0))
    if bad.size:
        t = raw.trials[int(bad[0])]
        raise DataError(f"zero cohort standard deviation for trial ({t.model_id}, {t.segment_id})")
    return mu_e, sd_e, mu_t, sd_t


def adaptive_snorm(raw: ScoreSet, enroll_cohort: Mapping[str, Sequence[float]],
                   probe_cohort: Mapping[str, Sequence[float]], top_fraction: float = 0.3) -> ScoreSet:
    """Symmetric adaptive S-norm over the top-scoring cohort fraction per side."""
    mu_e, sd_e, mu_t, sd_t = _trial_stats(raw, enroll_cohort, probe_cohort, top_fraction)
    s = raw.scores
    return raw.with_scores(0.5 * ((s - mu_e) / sd_e + (s - mu_t) / sd_t))


def cal_norm(raw: ScoreSet, enroll_cohort, probe_cohort, top_fraction: float = 0.3,
             a: float = 1.0, b: float = 0.5) -> ScoreSet:
    """Subtract ``a * mean + b * std`` of the averaged two-sided cohort statistics."""
    mu_e, sd_e, mu_t, sd_t = _trial_stats(raw, enroll_cohort, probe_cohort, top_fraction)
    mu = 0.5 * (mu_e + mu_t)
    sd = 0.5 * (sd_e + sd_t)
    return raw.with_scores(raw.scores - (a * mu + b * sd))
