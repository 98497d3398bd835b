"""Synthetic evaluation campaigns drawn from a Gaussian speaker/session model.

Speaker means are ``N(0, b*I)`` and utterances ``N(mean, w*I)``, so the
exact LLR of any trial is available in closed form (:func:`oracle_llr`).
Each speaker draws from its own RNG stream derived from ``(seed, index)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import DataError, EmbeddingSet, TrialKey, TrialList


@dataclass(frozen=True)
class CorpusSpec:
    n_speakers: int = 200
    utts_per_speaker: int = 5
    dim: int = 10
    b: float = 1.0
    w: float = 1.0
    domain_shift: tuple | None = None
    shifted_fraction: float = 0.5
    duration_log_mean: float = math.log(60.0)
    duration_log_sd: float = 0.5
    seed: int = 0
    # duration-dependent miscalibration: s + dur_alpha*log(d_p) + dur_beta*log(d_r)
    dur_alpha: float = 0.0
    dur_beta: float = 0.0

    def __post_init__(self):
        if self.n_speakers < 1 or self.utts_per_speaker < 1 or self.dim < 1:
            raise DataError("speaker, utterance and dimension counts must be >= 1")
        if self.b < 0 or self.w <= 0:
            raise DataError("need b >= 0 and w > 0")
        if self.duration_log_sd < 0:
            raise DataError("duration_log_sd must be nonnegative")
        if self.domain_shift is not None and len(self.domain_shift) != self.dim:
            raise DataError("domain_shift length must equal dim")
        if not 0.0 <= self.shifted_fraction <= 1.0:
            raise DataError("shifted_fraction must be in [0, 1]")


def speaker_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_corpus(spec: CorpusSpec) -> EmbeddingSet:
    """Labeled embeddings with durations and domain tags ('A' or shifted 'B')."""
    n, u, d = spec.n_speakers, spec.utts_per_speaker, spec.dim
    shift = None if spec.domain_shift is None else np.asarray(spec.domain_shift, dtype=np.float64)
    n_shifted = round(spec.shifted_fraction * n) if shift is not None else 0
    vecs = np.empty((n * u, d))
    secs = np.empty(n * u)
    ids, labels, domains = [], {}, {}
    sb, sw = math.sqrt(spec.b), math.sqrt(spec.w)
    for i in range(n):
        rng = speaker_rng(spec.seed, i)
        mean = sb * rng.standard_normal(d)
        rows = slice(i * u, (i + 1) * u)
        vecs[rows] = mean + sw * rng.standard_normal((u, d))
        secs[rows] = np.exp(spec.duration_log_mean + spec.duration_log_sd * rng.standard_normal(u))
        dom = "B" if i >= n - n_shifted else "A"
        if dom == "B":
            vecs[rows] += shift
        spk = f"spk{i:05d}"
        for j in range(u):
            sid = f"{spk}-{j:03d}"
            ids.append(sid)
            labels[sid] = spk
            domains[sid] = dom
    return EmbeddingSet(ids, vecs, labels, domains, dict(zip(ids, secs.tolist())))


def make_trials(corpus: EmbeddingSet, n_target: int, n_nontarget: int, seed: int = 0):
    """Sample single-segment trials without replacement.

    Target pairs are unordered same-speaker utterance pairs; nontarget pairs
    are different-speaker pairs.  Returns ``(TrialList, TrialKey)``.
    """
    if n_target < 0 or n_nontarget < 0:
        raise DataError("trial counts must be nonnegative")
    rng = np.random.default_rng(seed)
    spk = corpus.label_array()
    ids = corpus.ids
    by_spk = {}
    for i, s in enumerate(spk):
        by_spk.setdefault(s, []).append(i)
    tgt_pool = [(a, b) for rows in by_spk.values()
                for k, a in enumerate(rows) for b in rows[k + 1:]]
    if n_target > len(tgt_pool):
        raise DataError(f"requested {n_target} target trials, only {len(tgt_pool)} available")
    n = len(ids)
    same = sum(len(r) * (len(r) - 1) // 2 for r in by_spk.values())
    available_non = n * (n - 1) // 2 - same
    if n_nontarget > available_non:
        raise DataError(f"requested {n_nontarget} nontarget trials, only {available_non} available")
    pick = rng.choice(len(tgt_pool), size=n_target, replace=False) if n_target else []
    pairs = [tgt_pool[k] for k in pick]
    seen = set()
    non = []
    if n_nontarget > available_non // 2:
        pool = [(a, b) for a in range(n) for b in range(a + 1, n) if spk[a] != spk[b]]
        non = [pool[k] for k in rng.choice(len(pool), size=n_nontarget, replace=False)]
    else:
        while len(non) < n_nontarget:
            need = n_nontarget - len(non)
            a = rng.integers(0, n, size=2 * need + 16)
            b = rng.integers(0, n, size=2 * need + 16)
            for x, y in zip(a.tolist(), b.tolist()):
                if x == y or spk[x] == spk[y]:
                    continue
                key = (min(x, y), max(x, y))
                if key in seen:
                    continue
                seen.add(key)
                non.append((x, y))
                if len(non) == n_nontarget:
                    break
    all_pairs = pairs + non
    lab = np.r_[np.ones(len(pairs), bool), np.zeros(len(non), bool)]
    order = rng.permutation(len(all_pairs))
    trials = TrialList(tuple(ids[all_pairs[k][0]] for k in order),
                       tuple(ids[all_pairs[k][1]] for k in order))
    return trials, TrialKey(trials, lab[order])


def oracle_llr(spec: CorpusSpec, e, t) -> np.ndarray:
    """Exact LLR under the isotropic model ``B = b*I, W = w*I, mu = 0``.

    ``e`` and ``t`` may be single vectors or (n, dim) arrays.
    """
    b, w = spec.b, spec.w
    if b == 0 and w == 0:
        raise DataError("oracle undefined for b = w = 0")
    e = np.asarray(e, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    d = e.shape[-1]
    tot = b + w
    u2 = 0.5 * np.sum((e + t) ** 2, axis=-1)
    v2 = 0.5 * np.sum((e - t) ** 2, axis=-1)
    quad = -0.5 * u2 * (1.0 / (tot + b) - 1.0 / tot) - 0.5 * v2 * (1.0 / w - 1.0 / tot)
    const = -0.5 * d * (math.log(tot + b) + math.log(w) - 2.0 * math.log(tot))
    return quad + const


def oracle_scores(spec: CorpusSpec, corpus: EmbeddingSet, trials: TrialList) -> np.ndarray:
    e = corpus.vectors[[corpus.index_of(m) for m in trials.model_ids]]
    t = corpus.vectors[[corpus.index_of(s) for s in trials.segment_ids]]
    return oracle_llr(spec, e, t)


def inject_duration_bias(scores, d_r, d_p, alpha: float, beta: float) -> np.ndarray:
    """``s + alpha*log(d_p) + beta*log(d_r)``."""
    return np.asarray(scores) + alpha * np.log(d_p) + beta * np.log(d_r)


def make_multisystem(n_speakers: int, utts_per_speaker: int, system_dims: Sequence[int],
                     latent_dim: int = 20, b: float = 1.0, w: float = 1.0,
                     seed: int = 0) -> list[EmbeddingSet]:
    """Several "extractors" observing the same speakers with independent noise.

    System ``k`` maps the shared speaker latent through a fixed random
    matrix into ``system_dims[k]`` dimensions and adds its own isotropic
    session noise, so systems carry complementary information.
    """
    root = np.random.default_rng([seed, 1 << 20])
    maps = [root.standard_normal((dk, latent_dim)) / math.sqrt(latent_dim) for dk in system_dims]
    n = n_speakers * utts_per_speaker
    out_vecs = [np.empty((n, dk)) for dk in system_dims]
    ids, labels = [], {}
    for i in range(n_speakers):
        rng = speaker_rng(seed, i)
        y = math.sqrt(b) * rng.standard_normal(latent_dim)
        rows = slice(i * utts_per_speaker, (i + 1) * utts_per_speaker)
        for k, dk in enumerate(system_dims):
            out_vecs[k][rows] = maps[k] @ y + math.sqrt(w) * rng.standard_normal((utts_per_speaker, dk))
        for j in range(utts_per_speaker):
            sid = f"spk{i:05d}-{j:03d}"
            ids.append(sid)
            labels[sid] = f"spk{i:05d}"
    return [EmbeddingSet(ids, v, labels) for v in out_vecs]
