"""Linear logistic-regression fusion and calibration with log-duration terms.

The fused LLR of a trial is

    w0 + sum_i w_i * S_i + w_r * log(d_r) + w_p * log(d_p)

with ``d_r`` the (summed) enrollment duration and ``d_p`` the probe duration.
Weights minimize the prior-weighted logistic loss (Cllr at the training
prior), which is convex; a damped Newton iteration solves it.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import metrics
from .core import DataError, ScoreSet

log = logging.getLogger(__name__)

BIAS, LOG_DR, LOG_DP = "__bias__", "__log_dr__", "__log_dp__"


@dataclass(frozen=True)
class FusionModel:
    names: tuple
    weights: np.ndarray
    bias: float = 0.0
    w_r: float = 0.0
    w_p: float = 0.0

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64).reshape(-1)
        names = tuple(self.names)
        if len(names) != w.size:
            raise DataError(f"{len(names)} subsystem names for {w.size} weights")
        if len(set(names)) != len(names) or set(names) & {BIAS, LOG_DR, LOG_DP}:
            raise DataError("subsystem names must be unique and not reserved")
        if not (np.all(np.isfinite(w)) and all(map(math.isfinite, (self.bias, self.w_r, self.w_p)))):
            raise DataError("fusion weights must be finite")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "bias", float(self.bias))
        object.__setattr__(self, "w_r", float(self.w_r))
        object.__setattr__(self, "w_p", float(self.w_p))

    @property
    def uses_durations(self) -> bool:
        return self.w_r != 0.0 or self.w_p != 0.0

    def to_text(self) -> str:
        rows = [(BIAS, self.bias)] + list(zip(self.names, self.weights.tolist()))
        rows += [(LOG_DR, self.w_r), (LOG_DP, self.w_p)]
        return "".join(f"{n}\t{float(v)!r}\n" for n, v in rows)

    @classmethod
    def from_text(cls, text: str, path=None) -> "FusionModel":
        from .formats import FileFormatError

        vals, names, weights = {}, [], []
        for n, line in enumerate(text.splitlines(), start=1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise FileFormatError("expected name<TAB>weight", path, n)
            try:
                v = float(parts[1])
            except ValueError:
                raise FileFormatError(f"non-numeric weight {parts[1]!r}", path, n) from None
            if not math.isfinite(v):
                raise FileFormatError(f"non-finite weight {parts[1]!r}", path, n)
            if parts[0] in (BIAS, LOG_DR, LOG_DP):
                vals[parts[0]] = v
            else:
                names.append(parts[0])
                weights.append(v)
        return cls(tuple(names), np.array(weights), vals.get(BIAS, 0.0),
                   vals.get(LOG_DR, 0.0), vals.get(LOG_DP, 0.0))


def _matrix(scores) -> np.ndarray:
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise DataError("score matrix must be (n_subsystems, n_trials)")
    return x


def _log_durations(d_r, d_p, n):
    if d_r is None or d_p is None:
        raise DataError("durations are required by this fusion model")
    d_r = np.asarray(d_r, dtype=np.float64).reshape(-1)
    d_p = np.asarray(d_p, dtype=np.float64).reshape(-1)
    if d_r.size != n or d_p.size != n:
        raise DataError("duration arrays must have one entry per trial")
    if np.any(d_r <= 0) or np.any(d_p <= 0):
        raise DataError("durations must be positive")
    return np.log(d_r), np.log(d_p)


def apply_fusion(m: FusionModel, scores, d_r=None, d_p=None) -> np.ndarray:
    """Fused LLR per trial for an aligned (n_subsystems, n_trials) matrix."""
    x = _matrix(scores)
    if x.shape[0] != m.weights.size:
        raise DataError(f"model has {m.weights.size} subsystems, matrix has {x.shape[0]} rows")
    out = m.bias + m.weights @ x
    if m.uses_durations:
        lr, lp = _log_durations(d_r, d_p, x.shape[1])
        out = out + m.w_r * lr + m.w_p * lp
    return out


def _design(x, d_r, d_p, use_durations):
    cols = [np.ones(x.shape[1]), *x]
    if use_durations:
        lr, lp = _log_durations(d_r, d_p, x.shape[1])
        cols += [lr, lp]
    return np.column_stack(cols)


def _objective(w, X, y, sw, offset, reg):
    z = X @ w + offset
    # signed margin: positive when the trial is classified correctly
    m = np.where(y, z, -z)
    loss = float(np.sum(sw * np.logaddexp(0.0, -m)) + np.sum(reg * w * w))
    p = np.exp(-np.logaddexp(0.0, m))          # sigmoid(-m)
    g = X.T @ (sw * np.where(y, -p, p)) + 2.0 * reg * w
    h = (X * (sw * p * (1.0 - p))[:, None]).T @ X + np.diag(2.0 * reg)
    return loss, g, h


def train_fusion(scores, labels, d_r=None, d_p=None, prior: float = 0.01,
                 use_durations: bool = False, ridge: float = 1e-6,
                 names: Sequence[str] | None = None, max_iter: int = 100,
                 tol: float = 1e-8, init=None) -> FusionModel:
    """Fit fusion weights by prior-weighted logistic regression.

    Stops once the gradient norm is below ``tol`` and the Newton step is
    negligible; raises ``RuntimeError`` if the gradient norm is still above
    ``tol`` after ``max_iter`` Newton steps.
    """
    x = _matrix(scores)
    y = np.asarray(labels.is_target if hasattr(labels, "is_target") else labels, dtype=bool).reshape(-1)
    if y.size != x.shape[1]:
        raise DataError("label count differs from trial count")
    nt = int(y.sum())
    nn = y.size - nt
    if nt == 0 or nn == 0:
        raise DataError("fusion training needs target and nontarget trials")
    if not 0.0 < prior < 1.0:
        raise DataError("prior must be in (0, 1)")
    X = _design(x, d_r, d_p, use_durations)
    sw = np.where(y, prior / nt, (1.0 - prior) / nn)
    offset = math.log(prior / (1.0 - prior))
    reg = np.full(X.shape[1], ridge)
    reg[0] = 0.0
    w = np.zeros(X.shape[1]) if init is None else np.array(init, dtype=np.float64)
    loss, g, h = _objective(w, X, y, sw, offset, reg)
    for it in range(max_iter):
        gnorm = float(np.linalg.norm(g))
        try:
            step = -np.linalg.solve(h, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(h, g, rcond=None)[0]
        # low-curvature directions need a step criterion on top of the gradient one
        if gnorm < tol and np.max(np.abs(step)) <= 1e-10 * (1.0 + np.max(np.abs(w))):
            break
        if not step @ g < 0:
            step = -g
        t = 1.0
        while True:
            w_new = w + t * step
            loss_new, g_new, h_new = _objective(w_new, X, y, sw, offset, reg)
            if loss_new <= loss + 1e-4 * t * (g @ step) or t < 1e-12:
                break
            t *= 0.5
        if loss_new > loss and t < 1e-12:
            # no further decrease representable; accept current point
            break
        w, loss, g, h = w_new, loss_new, g_new, h_new
        log.debug("fusion newton %d: loss %.12g |g| %.3g", it, loss, np.linalg.norm(g))
    gnorm = float(np.linalg.norm(g))
    if gnorm >= tol:
        raise RuntimeError(f"fusion did not converge: gradient norm {gnorm:.3g} after {max_iter} iterations")
    n = x.shape[0]
    names = tuple(names) if names is not None else tuple(f"sys{i + 1}" for i in range(n))
    w_r, w_p = (w[n + 1], w[n + 2]) if use_durations else (0.0, 0.0)
    return FusionModel(names, w[1:n + 1], w[0], w_r, w_p)


def calibrate_single(scores, labels, prior: float = 0.01, ridge: float = 1e-6,
                     name: str = "sys1") -> FusionModel:
    s = scores.scores if isinstance(scores, ScoreSet) else scores
    return train_fusion(np.asarray(s)[None, :], labels, prior=prior, ridge=ridge, names=(name,))


def contribution_report(m: FusionModel, scores, d_r=None, d_p=None) -> list[tuple]:
    """Rows ``(name, min w*S, max w*S, weight*100)`` per subsystem.

    Log-duration rows are appended when durations are given and the model
    uses them.
    """
    x = _matrix(scores)
    if x.shape[0] != m.weights.size:
        raise DataError("matrix rows do not match model subsystems")
    rows = []
    for name, w, s in zip(m.names, m.weights, x):
        c = w * s
        rows.append((name, float(c.min()), float(c.max()), 100.0 * float(w)))
    if m.uses_durations and d_r is not None and d_p is not None:
        lr, lp = _log_durations(d_r, d_p, x.shape[1])
        for name, w, v in (("log(d_r)", m.w_r, lr), ("log(d_p)", m.w_p, lp)):
            c = w * v
            rows.append((name, float(c.min()), float(c.max()), 100.0 * w))
    return rows


def format_contributions(rows) -> str:
    out = ["subsystem\tmin_contribution\tmax_contribution\tweight_x100"]
    out += [f"{n}\t{lo:.4f}\t{hi:.4f}\t{w:.4f}" for n, lo, hi, w in rows]
    return "\n".join(out) + "\n"


JACKKNIFE_METRICS = ("act_cprimary", "min_cprimary", "eer", "cllr")


def _summary(s, y):
    return {"act_cprimary": metrics.act_cprimary(s, y), "min_cprimary": metrics.min_cprimary(s, y),
            "eer": metrics.eer(s, y), "cllr": metrics.cllr(s, y)}


def jackknife(scores, labels, d_r=None, d_p=None, prior: float = 0.01,
              use_durations: bool = False, names=None, eval_scores=None,
              eval_labels=None, eval_d_r=None, eval_d_p=None, ridge: float = 1e-6) -> dict:
    """Leave-one-subsystem-out retraining.

    Returns ``{name: {metric: value_without - value_full}}`` measured on the
    evaluation data (the training data when no evaluation set is given);
    positive deltas mean the left-out subsystem was helping.
    """
    x = _matrix(scores)
    n = x.shape[0]
    if n < 2:
        raise DataError("jackknife needs at least two subsystems")
    names = tuple(names) if names is not None else tuple(f"sys{i + 1}" for i in range(n))
    if eval_scores is None:
        eval_scores, eval_labels, eval_d_r, eval_d_p = x, labels, d_r, d_p
    ex = _matrix(eval_scores)
    ey = np.asarray(eval_labels.is_target if hasattr(eval_labels, "is_target") else eval_labels, dtype=bool)
    full = train_fusion(x, labels, d_r, d_p, prior, use_durations, ridge, names)
    base = _summary(apply_fusion(full, ex, eval_d_r, eval_d_p), ey)
    out = {}
    for i in range(n):
        keep = [j for j in range(n) if j != i]
        m = train_fusion(x[keep], labels, d_r, d_p, prior, use_durations, ridge,
                         [names[j] for j in keep])
        res = _summary(apply_fusion(m, ex[keep], eval_d_r, eval_d_p), ey)
        out[names[i]] = {k: res[k] - base[k] for k in JACKKNIFE_METRICS}
    return out


def apply_offset(scores: ScoreSet, c: float) -> ScoreSet:
    return scores.with_scores(scores.scores + c)
