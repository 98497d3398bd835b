"""Pairwise quadratic-form scorer refined on a smoothed detection cost.

A trial ``(e, t)`` is scored as

    s = e'Lt (symmetrized) + e'Ge + t'Gt + c'(e + t) + k
        + u_sum*log(f_e + f_t) + u_diff*|log f_e - log f_t| + u_min*log(min(f_e, f_t))

where ``f`` are frame counts (10 ms shift).  The model starts from the exact
PLDA LLR expansion and is refined by gradient descent on the mean, over
operating points, of a sigmoid-smoothed normalized DCF.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import PRIMARY_OPERATING_POINTS, DataError, DurationInfo, EmbeddingSet, OperatingPoint, frames
from .formats import pack_matrices, unpack_matrices
from .linalg import sym
from .plda import PldaModel, PldaScorer
from .scoring import CosineScorer

log = logging.getLogger(__name__)


class PairMiningWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PsvmModel:
    cross: np.ndarray
    quad: np.ndarray
    lin: np.ndarray
    bias: float = 0.0
    dur: np.ndarray = None

    def __post_init__(self):
        lam = np.array(self.cross, dtype=np.float64)
        d = lam.shape[0]
        gam = np.array(self.quad, dtype=np.float64).reshape(d, d)
        c = np.array(self.lin, dtype=np.float64).reshape(d)
        u = np.zeros(3) if self.dur is None else np.array(self.dur, dtype=np.float64).reshape(3)
        if lam.shape != (d, d):
            raise DataError("cross matrix must be square")
        arrays = (lam, gam, c, u)
        if not all(np.all(np.isfinite(a)) for a in arrays) or not math.isfinite(self.bias):
            raise DataError("PSVM parameters must be finite")
        if not np.allclose(gam, gam.T, atol=1e-10 * (1 + np.abs(gam).max())):
            raise DataError("quadratic matrix must be symmetric")
        for a in arrays:
            a.setflags(write=False)
        object.__setattr__(self, "cross", lam)
        object.__setattr__(self, "quad", gam)
        object.__setattr__(self, "lin", c)
        object.__setattr__(self, "dur", u)
        object.__setattr__(self, "bias", float(self.bias))

    @property
    def dim(self) -> int:
        return self.lin.shape[0]

    @classmethod
    def zeros(cls, dim: int) -> "PsvmModel":
        return cls(np.zeros((dim, dim)), np.zeros((dim, dim)), np.zeros(dim), 0.0, np.zeros(3))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.cross.ravel(), self.quad.ravel(), self.lin, [self.bias], self.dur])

    @classmethod
    def from_flat(cls, v: np.ndarray, dim: int) -> "PsvmModel":
        d2 = dim * dim
        return cls(v[:d2].reshape(dim, dim), v[d2:2 * d2].reshape(dim, dim),
                   v[2 * d2:2 * d2 + dim], float(v[2 * d2 + dim]), v[2 * d2 + dim + 1:])

    def to_bytes(self) -> bytes:
        return pack_matrices(b"PSVM", (self.dim,),
                             (self.cross, self.quad, self.lin, [self.bias], self.dur))

    @classmethod
    def from_bytes(cls, data: bytes, path=None) -> "PsvmModel":
        _, (lam, gam, c, k, u) = unpack_matrices(
            data, b"PSVM", 1, lambda d: [(d, d), (d, d), (d,), (1,), (3,)], path)
        return cls(lam, gam, c, float(k[0]), u)


def duration_features(frames_e, frames_t) -> np.ndarray:
    """(n, 3) array of [log sum, |log difference|, log min] of frame counts."""
    fe = np.maximum(np.asarray(frames_e, dtype=np.float64), 1.0)
    ft = np.maximum(np.asarray(frames_t, dtype=np.float64), 1.0)
    le, lt = np.log(fe), np.log(ft)
    return np.column_stack([np.log(fe + ft), np.abs(le - lt), np.minimum(le, lt)])


class PsvmScorer:
    """Batch scorer compatible with :func:`svback.scoring.score_trials`."""

    def __init__(self, m: PsvmModel, use_durations: bool | None = None):
        self.model = m
        self.uses_durations = bool(np.any(m.dur != 0)) if use_durations is None else use_durations

    def prepare(self, x, seconds=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.model.dim:
            raise DataError(f"PSVM model has dim {self.model.dim}, embeddings have {x.shape[1]}")
        m = self.model
        q = np.einsum("ij,jk,ik->i", x, m.quad, x)
        f = None if seconds is None else frames(seconds)
        return x, x @ m.cross.T, q, x @ m.lin, f

    def pair_scores(self, fe, ft, ie, it):
        xe, le, qe, ce, f_e = fe
        xt, lt, qt, ct, f_t = ft
        # le rows are cross @ e, so e'(cross)t = t . le
        cross = 0.5 * (np.einsum("ij,ij->i", xe[ie], lt[it]) + np.einsum("ij,ij->i", xt[it], le[ie]))
        s = ((qe[ie] + qt[it]) + cross) + (ce[ie] + ct[it]) + self.model.bias
        if self.uses_durations:
            if f_e is None or f_t is None:
                raise DataError("PSVM model uses durations but none were given")
            phi = duration_features(f_e[ie], f_t[it])
            u = self.model.dur
            s = s + (u[0] * phi[:, 0] + u[1] * phi[:, 1] + u[2] * phi[:, 2])
        return s


def score_psvm(m: PsvmModel, e, t, dur: DurationInfo | None = None) -> float:
    sc = PsvmScorer(m, use_durations=dur is not None)
    fe = sc.prepare(e, None if dur is None else [dur.reference_seconds])
    ft = sc.prepare(t, None if dur is None else [dur.probe_seconds])
    return float(sc.pair_scores(fe, ft, [0], [0])[0])


def init_psvm_from_plda(plda: PldaModel) -> PsvmModel:
    """Expand the PLDA LLR (centered at mu) into PSVM parameters."""
    sc = PldaScorer(plda)
    lam, gam, mu = sc.cross, sc.quad, plda.mu
    lin = -(2.0 * gam + lam) @ mu
    bias = sc.const + 2.0 * float(mu @ gam @ mu) + float(mu @ lam @ mu)
    return PsvmModel(lam, gam, lin, bias, np.zeros(3))


# -- training pairs ------------------------------------------------------------

@dataclass(frozen=True)
class PairList:
    seg_a: tuple
    seg_b: tuple
    same: np.ndarray

    def __post_init__(self):
        same = np.asarray(self.same, dtype=bool)
        if not (len(self.seg_a) == len(self.seg_b) == same.size):
            raise DataError("pair list columns differ in length")
        for a, b, s in zip(self.seg_a, self.seg_b, same):
            if not s and a == b:
                raise DataError(f"segment {a!r} paired with itself as a different-speaker pair")
        object.__setattr__(self, "same", same)

    def __len__(self):
        return self.same.size


def speaker_similarity(es: EmbeddingSet):
    """Cosine similarity between speaker-mean embeddings: ``(speakers, matrix)``."""
    spk = es.label_array()
    speakers = sorted(set(spk.tolist()))
    pos = {s: i for i, s in enumerate(speakers)}
    inv = np.array([pos[s] for s in spk])
    sums = np.zeros((len(speakers), es.dim))
    np.add.at(sums, inv, es.vectors)
    means = CosineScorer().prepare(sums / np.bincount(inv)[:, None])
    return speakers, np.clip(means @ means.T, -1.0, 1.0)


def mine_pairs(es: EmbeddingSet, similarity=None, n_same: int = 16, n_imp: int = 240,
               seed: int = 0) -> PairList:
    """Same-speaker pairs plus impostor pairs against the most similar speakers.

    ``similarity`` is ``(speakers, matrix)`` as returned by
    :func:`speaker_similarity` (computed when omitted).  Per speaker, up to
    ``n_same`` distinct same-speaker utterance pairs are drawn, and one
    impostor pair (random utterance on each side) is formed with each of the
    ``min(n_imp, n_speakers - 1)`` most similar other speakers.
    """
    speakers, sim = similarity if similarity is not None else speaker_similarity(es)
    sim = np.asarray(sim, dtype=np.float64)
    if len(speakers) < 2:
        raise DataError("pair mining needs at least two speakers")
    if sim.shape != (len(speakers), len(speakers)):
        raise DataError("similarity matrix does not match speaker list")
    utts = {s: [] for s in speakers}
    for sid, spk in zip(es.ids, es.label_array().tolist()):
        if spk not in utts:
            raise DataError(f"speaker {spk!r} missing from similarity matrix")
        utts[spk].append(sid)
    rng = np.random.default_rng(seed)
    a, b, same = [], [], []
    n_nb = min(n_imp, len(speakers) - 1)
    for i, spk in enumerate(speakers):
        mine = utts[spk]
        if not mine:
            continue
        k = len(mine)
        n_combos = k * (k - 1) // 2
        if n_combos == 0:
            warnings.warn(f"speaker {spk!r} has a single utterance; no same-speaker pairs",
                          PairMiningWarning, stacklevel=2)
        else:
            for c in rng.choice(n_combos, size=min(n_same, n_combos), replace=False).tolist():
                # unrank combination index c into (x, y), x < y
                x = 0
                while c >= k - 1 - x:
                    c -= k - 1 - x
                    x += 1
                a.append(mine[x])
                b.append(mine[x + 1 + c])
                same.append(True)
        row = sim[i].copy()
        row[i] = -np.inf
        order = np.argsort(-row, kind="stable")
        neighbours = [speakers[j] for j in order if j != i and utts[speakers[j]]][:n_nb]
        for nb in neighbours:
            other = utts[nb]
            a.append(mine[int(rng.integers(len(mine)))])
            b.append(other[int(rng.integers(len(other)))])
            same.append(False)
    return PairList(tuple(a), tuple(b), np.array(same, dtype=bool))


@dataclass(frozen=True)
class PairData:
    """Embeddings (and optional duration features) materialized per pair."""

    e: np.ndarray
    t: np.ndarray
    same: np.ndarray
    phi: np.ndarray | None = None

    @classmethod
    def build(cls, pairs: PairList, es: EmbeddingSet, use_durations: bool = False) -> "PairData":
        ia = [es.index_of(s) for s in pairs.seg_a]
        ib = [es.index_of(s) for s in pairs.seg_b]
        phi = None
        if use_durations:
            sec = es.duration_array()
            phi = duration_features(frames(sec[ia]), frames(sec[ib]))
        return cls(es.vectors[ia], es.vectors[ib], pairs.same.copy(), phi)

    def take(self, idx) -> "PairData":
        return PairData(self.e[idx], self.t[idx], self.same[idx],
                        None if self.phi is None else self.phi[idx])

    def __len__(self):
        return self.same.size


def _pair_scores(m: PsvmModel, data: PairData) -> np.ndarray:
    e, t = data.e, data.t
    cross = 0.5 * (np.einsum("ij,ij->i", e @ m.cross, t) + np.einsum("ij,ij->i", t @ m.cross, e))
    s = cross + np.einsum("ij,ij->i", e @ m.quad, e) + np.einsum("ij,ij->i", t @ m.quad, t)
    s = s + (e + t) @ m.lin + m.bias
    if data.phi is not None:
        s = s + data.phi @ m.dur
    return s


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def _loss_wrt_scores(s, same, ops, tau):
    """Smoothed DCF and its derivative with respect to each pair score."""
    n_same = int(same.sum())
    n_diff = same.size - n_same
    if n_same == 0 or n_diff == 0:
        raise DataError("smoothed DCF needs both same- and different-speaker pairs")
    loss = 0.0
    grad = np.zeros_like(s)
    for op in ops:
        theta = op.threshold
        z = np.where(same, theta - s, s - theta) / tau
        sig = _sigmoid(z)
        w_miss = op.p_target * op.c_miss / op.normalizer / n_same
        w_fa = (1.0 - op.p_target) * op.c_fa / op.normalizer / n_diff
        wts = np.where(same, w_miss, w_fa)
        loss += float(np.sum(wts * sig))
        dsig = sig * _sigmoid(-z) / tau
        grad += wts * np.where(same, -dsig, dsig)
    k = len(ops)
    return loss / k, grad / k


def smoothed_dcf_loss(m: PsvmModel, data: PairData,
                      ops: Sequence[OperatingPoint] = PRIMARY_OPERATING_POINTS,
                      tau: float = 1.0) -> float:
    """Mean over operating points of the sigmoid-smoothed normalized DCF."""
    if tau <= 0:
        raise DataError("temperature must be positive")
    return _loss_wrt_scores(_pair_scores(m, data), data.same, ops, tau)[0]


def loss_and_grad(m: PsvmModel, data: PairData,
                  ops: Sequence[OperatingPoint] = PRIMARY_OPERATING_POINTS, tau: float = 1.0):
    """Loss and its gradient as a model of the same shape."""
    if tau <= 0:
        raise DataError("temperature must be positive")
    s = _pair_scores(m, data)
    loss, g = _loss_wrt_scores(s, data.same, ops, tau)
    e, t = data.e, data.t
    ge, gt = e * g[:, None], t * g[:, None]
    d_cross = sym(ge.T @ t)
    d_quad = sym(ge.T @ e + gt.T @ t)
    d_lin = (ge + gt).sum(axis=0)
    d_dur = np.zeros(3) if data.phi is None else data.phi.T @ g
    return loss, PsvmModel(d_cross, d_quad, d_lin, float(g.sum()), d_dur)


@dataclass
class RefineConfig:
    learning_rate: float = 1e-3
    batch_size: int = 40 * 4096
    epochs: int = 50
    tau: float = 1.0
    seed: int = 0
    momentum: float = 0.0
    train_durations: bool = True


def _batches(same: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Stratified shuffled batches, each containing both pair labels."""
    n = same.size
    n_batches = max(1, math.ceil(n / batch_size))
    n_batches = min(n_batches, int(same.sum()), int((~same).sum()))
    pos = rng.permutation(np.flatnonzero(same))
    neg = rng.permutation(np.flatnonzero(~same))
    return [np.sort(np.concatenate([p, q]))
            for p, q in zip(np.array_split(pos, n_batches), np.array_split(neg, n_batches))]


def refine_psvm(m: PsvmModel, data: PairData,
                ops: Sequence[OperatingPoint] = PRIMARY_OPERATING_POINTS,
                config: RefineConfig | None = None, return_history: bool = False):
    """Gradient descent on the smoothed DCF.

    The model with the lowest full-set training loss seen at an epoch
    boundary is returned, so the result never has a higher training loss
    than the initialization.
    """
    cfg = config or RefineConfig()
    if cfg.tau <= 0 or cfg.learning_rate < 0 or cfg.batch_size < 1 or cfg.epochs < 0:
        raise DataError("invalid refinement hyper-parameters")
    rng = np.random.default_rng(cfg.seed)
    dim = m.dim
    use_dur = data.phi is not None and cfg.train_durations
    v = m.flat()
    vel = np.zeros_like(v)
    best_v = v.copy()
    best = smoothed_dcf_loss(m, data, ops, cfg.tau)
    history = [best]
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(data.same, cfg.batch_size, rng):
            _, g = loss_and_grad(PsvmModel.from_flat(v, dim), data.take(idx), ops, cfg.tau)
            gv = g.flat()
            if not use_dur:
                gv[-3:] = 0.0
            vel = cfg.momentum * vel - cfg.learning_rate * gv
            v = v + vel
            if not np.all(np.isfinite(v)):
                raise RuntimeError(f"PSVM refinement diverged at epoch {epoch}")
        loss = smoothed_dcf_loss(PsvmModel.from_flat(v, dim), data, ops, cfg.tau)
        if not math.isfinite(loss):
            raise RuntimeError(f"PSVM refinement diverged at epoch {epoch} (loss {loss})")
        history.append(loss)
        log.debug("psvm epoch %d: loss %.6g", epoch, loss)
        if loss < best:
            best, best_v = loss, v.copy()
    out = PsvmModel.from_flat(best_v, dim)
    return (out, history) if return_history else out
