"""Gaussian two-covariance PLDA: EM training, interpolation, adaptation, scoring.

Model: speaker mean ``y ~ N(mu, B)``, observation ``x ~ N(y, W)``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DataError, EmbeddingSet
from .formats import pack_matrices, unpack_matrices
from .linalg import logdet, sym
from .transforms import DegenerateWarning

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class PldaModel:
    mu: np.ndarray
    B: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(-1)
        d = mu.shape[0]
        B = np.array(self.B, dtype=np.float64).reshape(d, d)
        W = np.array(self.W, dtype=np.float64).reshape(d, d)
        if not (np.allclose(B, B.T, atol=1e-10 * (1 + np.abs(B).max()))
                and np.allclose(W, W.T, atol=1e-10 * (1 + np.abs(W).max()))):
            raise DataError("PLDA covariances must be symmetric")
        for a in (mu, B, W):
            a.setflags(write=False)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "W", W)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    def to_bytes(self) -> bytes:
        return pack_matrices(b"PLDA", (self.dim,), (self.mu, self.B, self.W))

    @classmethod
    def from_bytes(cls, data: bytes, path=None) -> "PldaModel":
        _, (mu, B, W) = unpack_matrices(data, b"PLDA", 1, lambda d: [(d,), (d, d), (d, d)], path)
        return cls(mu, B, W)


# -- EM ----------------------------------------------------------------------

class _Stats:
    """Per-speaker sufficient statistics, grouped by utterance count."""

    def __init__(self, x: np.ndarray, labels: np.ndarray):
        self.n_total, self.dim = x.shape
        _, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
        sums = np.zeros((len(counts), self.dim))
        np.add.at(sums, inv, x)
        self.counts = counts
        self.means = sums / counts[:, None]
        xc = x - self.means[inv]
        self.within = sym(xc.T @ xc)  # sum over speakers of scatter about own mean
        self.groups = [(int(n), np.flatnonzero(counts == n)) for n in np.unique(counts)]

    @property
    def n_speakers(self):
        return len(self.counts)


def _posteriors(st: _Stats, m: PldaModel):
    """Posterior speaker means and per-group posterior covariances."""
    yhat = np.empty_like(st.means)
    covs = {}
    for n, idx in st.groups:
        gain = np.linalg.solve(m.B + m.W / n, m.B).T   # B (B + W/n)^-1
        yhat[idx] = m.mu + (st.means[idx] - m.mu) @ gain.T
        covs[n] = sym(m.B - gain @ m.B)
    return yhat, covs


def log_likelihood(st: _Stats, m: PldaModel) -> float:
    """Exact marginal log-likelihood of the training data under ``m``."""
    d = st.dim
    w_inv = np.linalg.inv(m.W)
    ld_w = logdet(m.W)
    ll = -0.5 * float(np.sum(w_inv * st.within))
    for n, idx in st.groups:
        k = len(idx)
        ll -= k * (0.5 * (n - 1) * d * LOG_2PI + 0.5 * (n - 1) * ld_w + 0.5 * d * math.log(n))
        cov = m.B + m.W / n
        chol = np.linalg.cholesky(cov)
        z = np.linalg.solve(chol, (st.means[idx] - m.mu).T)
        ll -= 0.5 * float(np.sum(z * z)) + k * (0.5 * d * LOG_2PI + float(np.sum(np.log(np.diag(chol)))))
    return ll


def _floor(cov: np.ndarray, scale: float, what: str) -> tuple[np.ndarray, bool]:
    w = np.linalg.eigvalsh(cov)
    tol = 1e-10 * max(scale, 1e-300)
    if w.min() > tol:
        return cov, False
    warnings.warn(f"{what} is degenerate; adding ridge", DegenerateWarning, stacklevel=3)
    d = cov.shape[0]
    return cov + (max(tol, -w.min()) + 1e-6 * scale) * np.eye(d), True


def _init_model(st: _Stats) -> PldaModel:
    x_mean = (st.means * st.counts[:, None]).sum(axis=0) / st.n_total
    dm = st.means - x_mean
    B = sym(dm.T @ dm / st.n_speakers)
    W = st.within / st.n_total
    scale = max(np.trace(B) + np.trace(W), 1e-12) / st.dim
    W, _ = _floor(W, scale, "within-speaker covariance")
    return PldaModel(x_mean, B, W)


def fit_plda_em(es: EmbeddingSet, iterations: int = 10, init: PldaModel | None = None,
                return_loglik: bool = False):
    """Fit a two-covariance PLDA model by EM.

    The marginal log-likelihood is evaluated after every iteration and a
    decrease beyond numerical slack raises ``RuntimeError``.  With
    ``return_loglik`` the list of log-likelihoods (initial model first) is
    returned alongside the model.
    """
    if iterations < 1:
        raise DataError("iterations must be >= 1")
    labels = es.label_array()
    st = _Stats(es.vectors, labels)
    if st.n_speakers < 2:
        raise DataError("PLDA training needs at least two speakers")
    if st.counts.max() < 2:
        log.warning("every speaker has a single utterance; B and W are not separately identifiable")
    m = init if init is not None else _init_model(st)
    if m.dim != st.dim:
        raise DataError("initial model dimension mismatch")
    lls = [log_likelihood(st, m)]
    for it in range(iterations):
        yhat, covs = _posteriors(st, m)
        mu = yhat.mean(axis=0)
        dy = yhat - mu
        dx = st.means - yhat
        b_acc = dy.T @ dy
        w_acc = st.within + (dx * st.counts[:, None]).T @ dx
        for n, idx in st.groups:
            b_acc += len(idx) * covs[n]
            w_acc += n * len(idx) * covs[n]
        B = sym(b_acc / st.n_speakers)
        W = sym(w_acc / st.n_total)
        scale = max(np.trace(B) + np.trace(W), 1e-12) / st.dim
        W, ridged = _floor(W, scale, "within-speaker covariance")
        m = PldaModel(mu, B, W)
        ll = log_likelihood(st, m)
        if not ridged and ll < lls[-1] - 1e-8 * max(1.0, abs(lls[-1])):
            raise RuntimeError(f"EM log-likelihood decreased at iteration {it + 1}: "
                               f"{lls[-1]!r} -> {ll!r}")
        lls.append(ll)
        log.debug("PLDA EM iteration %d: loglik %.6f", it + 1, ll)
    return (m, lls) if return_loglik else m


def interpolate_plda(m_out: PldaModel, m_in: PldaModel, alpha: float) -> PldaModel:
    """Parameter-wise ``(1 - alpha) * m_out + alpha * m_in``."""
    if m_out.dim != m_in.dim:
        raise DataError(f"PLDA dims differ: {m_out.dim} vs {m_in.dim}")
    if not 0.0 <= alpha <= 1.0:
        raise DataError("alpha must be in [0, 1]")
    mix = lambda a, b: (1.0 - alpha) * a + alpha * b  # noqa: E731
    return PldaModel(mix(m_out.mu, m_in.mu), mix(m_out.B, m_in.B), mix(m_out.W, m_in.W))


def adapt_plda(m: PldaModel, adaptation: EmbeddingSet, within_weight: float = 0.5,
               between_weight: float = 0.5, iterations: int = 10) -> PldaModel:
    """Fit PLDA on in-domain data and interpolate with ``m``.

    ``within_weight`` mixes W and ``between_weight`` mixes mu and B.
    """
    fitted = fit_plda_em(adaptation, iterations)
    if fitted.dim != m.dim:
        raise DataError("adaptation data dimension mismatch")
    between = interpolate_plda(m, fitted, between_weight)
    within = interpolate_plda(m, fitted, within_weight)
    return PldaModel(between.mu, between.B, within.W)


# -- scoring -----------------------------------------------------------------

class PldaScorer:
    """Precomputed quadratic form of the two-covariance LLR.

    With centered vectors, ``LLR = e'Ge + t'Gt + (Re).(Rt) + k`` where the
    cross matrix ``R'R`` is positive semi-definite, which keeps the score
    exactly symmetric in its two arguments.
    """

    def __init__(self, m: PldaModel):
        self.model = m
        T = m.B + m.W
        t_inv = np.linalg.inv(T)
        q_sum = sym(np.linalg.inv(T + m.B) - t_inv)   # precision change along e + t
        q_diff = sym(np.linalg.inv(m.W) - t_inv)      # precision change along e - t
        self.quad = sym(-0.25 * (q_sum + q_diff))
        self.cross = sym(0.5 * (q_diff - q_sum))
        w, v = np.linalg.eigh(self.cross)
        self.proj = (v * np.sqrt(np.clip(w, 0.0, None))).T
        self.const = -0.5 * logdet(T + m.B) - 0.5 * logdet(m.W) + logdet(T)

    uses_durations = False

    def prepare(self, x: np.ndarray, seconds=None):
        xc = np.atleast_2d(x) - self.model.mu
        q = np.einsum("ij,jk,ik->i", xc, self.quad, xc)
        return q, xc @ self.proj.T

    def pair_scores(self, fe, ft, ie, it) -> np.ndarray:
        qe, pe = fe
        qt, pt = ft
        return (qe[ie] + qt[it]) + np.einsum("ij,ij->i", pe[ie], pt[it]) + self.const

    def score(self, e: np.ndarray, t: np.ndarray) -> float:
        (qe, pe), (qt, pt) = self.prepare(e), self.prepare(t)
        return float((qe[0] + qt[0]) + np.dot(pe[0], pt[0]) + self.const)


def score_plda(m: PldaModel, enroll, probe: np.ndarray) -> float:
    """LLR of same vs different speaker; multi-segment enrollment is averaged."""
    e = np.atleast_2d(np.asarray(enroll, dtype=np.float64))
    t = np.asarray(probe, dtype=np.float64).reshape(-1)
    if e.shape[1] != m.dim or t.shape[0] != m.dim:
        raise DataError(f"dimension mismatch with PLDA model of dim {m.dim}")
    return PldaScorer(m).score(e.mean(axis=0), t)
