"""Detection metrics: ROC/DET sweep, EER, DCF, C_primary, Cllr, equalization.

All functions take scores and boolean target labels in the same trial order
(``ScoreSet`` / ``TrialKey`` objects are accepted as well).  A trial is
accepted when its score is >= the threshold.
"""
from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy.special import ndtri

from .core import PRIMARY_OPERATING_POINTS, DataError, OperatingPoint, ScoreSet, TrialKey

LOG2 = math.log(2.0)


class RocPoint(NamedTuple):
    threshold: float
    p_miss: float
    p_fa: float


def _split(scores, labels):
    s = scores.scores if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=np.float64)
    lab = labels.is_target if isinstance(labels, TrialKey) else np.asarray(labels, dtype=bool)
    s = s.reshape(-1)
    lab = lab.reshape(-1)
    if s.shape != lab.shape:
        raise DataError(f"{s.size} scores for {lab.size} labels")
    tar, non = s[lab], s[~lab]
    if tar.size == 0 or non.size == 0:
        raise DataError("metrics need at least one target and one nontarget trial")
    return tar, non


def roc(scores, labels):
    """Thresholds, miss and false-alarm rates, one entry per distinct score.

    The first entry is the ``-inf`` sentinel (accept all) and the last the
    ``+inf`` sentinel (reject all).
    """
    tar, non = _split(scores, labels)
    tar, non = np.sort(tar), np.sort(non)
    thr = np.unique(np.concatenate([tar, non]))
    thr = np.concatenate([[-np.inf], thr, [np.inf]])
    p_miss = np.searchsorted(tar, thr, side="left") / tar.size
    p_fa = (non.size - np.searchsorted(non, thr, side="left")) / non.size
    p_miss[-1], p_fa[-1] = 1.0, 0.0
    return thr, p_miss, p_fa


def roc_points(scores, labels) -> list[RocPoint]:
    return [RocPoint(float(t), float(m), float(f)) for t, m, f in zip(*roc(scores, labels))]


def eer_from_rates(p_miss: np.ndarray, p_fa: np.ndarray) -> float:
    """Crossing of the miss and false-alarm curves, linearly interpolated."""
    j = int(np.argmax(p_miss >= p_fa))
    if p_miss[j] == p_fa[j] or j == 0:
        return float(p_miss[j])
    m0, f0 = p_miss[j - 1], p_fa[j - 1]
    dm, df = p_miss[j] - m0, p_fa[j] - f0
    alpha = (f0 - m0) / (dm - df)
    return float(m0 + alpha * dm)


def eer(scores, labels) -> float:
    _, pm, pf = roc(scores, labels)
    return eer_from_rates(pm, pf)


def dcf(p_miss, p_fa, op: OperatingPoint):
    """Normalized detection cost."""
    return (op.p_target * op.c_miss * p_miss + (1.0 - op.p_target) * op.c_fa * p_fa) / op.normalizer


def min_dcf(scores, labels, op: OperatingPoint = PRIMARY_OPERATING_POINTS[0]) -> float:
    _, pm, pf = roc(scores, labels)
    return float(np.min(dcf(pm, pf, op)))


def act_dcf(scores, labels, op: OperatingPoint = PRIMARY_OPERATING_POINTS[0]) -> float:
    tar, non = _split(scores, labels)
    theta = op.threshold
    pm = np.count_nonzero(tar < theta) / tar.size
    pf = np.count_nonzero(non >= theta) / non.size
    return float(dcf(pm, pf, op))


def c_primary(scores, labels, kind: str = "min",
              ops: Sequence[OperatingPoint] = PRIMARY_OPERATING_POINTS) -> float:
    """Mean normalized DCF over the primary operating points."""
    if kind == "min":
        _, pm, pf = roc(scores, labels)
        vals = [float(np.min(dcf(pm, pf, op))) for op in ops]
    elif kind == "act":
        vals = [act_dcf(scores, labels, op) for op in ops]
    else:
        raise ValueError(f"kind must be 'min' or 'act', not {kind!r}")
    return float(np.mean(vals))


def min_cprimary(scores, labels) -> float:
    return c_primary(scores, labels, "min")


def act_cprimary(scores, labels) -> float:
    return c_primary(scores, labels, "act")


def cllr(scores, labels) -> float:
    tar, non = _split(scores, labels)
    c_tar = np.mean(np.logaddexp(0.0, -tar))
    c_non = np.mean(np.logaddexp(0.0, non))
    return float(0.5 * (c_tar + c_non) / LOG2)


def pav(scores, labels):
    """Pool-adjacent-violators fit of P(target | score).

    Returns ``(n_target, n_total)`` per monotone block, in ascending score
    order.  Tied scores always share a block.
    """
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels, dtype=bool)
    order = np.argsort(s, kind="stable")
    s, lab = s[order], lab[order]
    starts = np.flatnonzero(np.r_[True, s[1:] != s[:-1]])
    tar = np.add.reduceat(lab.astype(np.int64), starts)
    cnt = np.diff(np.r_[starts, s.size])
    st_t, st_n = [], []
    for t, n in zip(tar.tolist(), cnt.tolist()):
        st_t.append(t)
        st_n.append(n)
        # merge while the previous block's rate exceeds the current one
        while len(st_t) > 1 and st_t[-2] * st_n[-1] > st_t[-1] * st_n[-2]:
            t2, n2 = st_t.pop(), st_n.pop()
            st_t[-1] += t2
            st_n[-1] += n2
    return np.array(st_t), np.array(st_n)


def min_cllr(scores, labels) -> float:
    """Cllr after the optimal monotone (PAV) recalibration."""
    tar, non = _split(scores, labels)
    nt, nn = tar.size, non.size
    bt, bn = pav(np.concatenate([tar, non]), np.r_[np.ones(nt, bool), np.zeros(nn, bool)])
    bnon = bn - bt
    total = 0.0
    odds_ratio = nt / nn
    for t, f in zip(bt.tolist(), bnon.tolist()):
        if t:
            total += t / nt * math.log1p(f / t * odds_ratio)
        if f:
            total += f / nn * math.log1p(t / f / odds_ratio)
    return 0.5 * total / LOG2


def equalized(metric: Callable, scores, labels, partitions: Sequence[str] | None = None) -> float:
    """Unweighted mean of ``metric`` computed separately per partition."""
    if partitions is None:
        if not isinstance(labels, TrialKey) or labels.partitions is None:
            raise DataError("equalized metrics need partition labels")
        partitions = labels.partitions
    s = scores.scores if isinstance(scores, ScoreSet) else np.asarray(scores, dtype=np.float64)
    lab = labels.is_target if isinstance(labels, TrialKey) else np.asarray(labels, dtype=bool)
    parts = np.asarray(partitions, dtype=object)
    if parts.shape[0] != s.shape[0]:
        raise DataError("partition count differs from trial count")
    vals = []
    for p in dict.fromkeys(parts.tolist()):
        m = parts == p
        if lab[m].all() or not lab[m].any():
            raise DataError(f"partition {p!r} lacks targets or nontargets")
        vals.append(metric(s[m], lab[m]))
    return float(np.mean(vals))


def det_points(scores, labels, clip: float = 1e-6):
    """(probit(Pfa), probit(Pmiss)) for every ROC point, rates clipped first."""
    _, pm, pf = roc(scores, labels)
    x = ndtri(np.clip(pf, clip, 1.0 - clip))
    y = ndtri(np.clip(pm, clip, 1.0 - clip))
    return np.column_stack([x, y])


def report(scores, labels) -> dict:
    return {
        "eer": eer(scores, labels),
        "min_cprimary": min_cprimary(scores, labels),
        "act_cprimary": act_cprimary(scores, labels),
        "cllr": cllr(scores, labels),
        "min_cllr": min_cllr(scores, labels),
    }
