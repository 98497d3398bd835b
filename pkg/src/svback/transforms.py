"""Embedding preprocessing: centering, whitening, LDA, CORAL, length norm, stacking."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .core import DataError, EmbeddingSet
from .formats import pack_matrices, unpack_matrices
from .linalg import covariance, fix_signs, sym, sym_power


class DegenerateWarning(UserWarning):
    """A fit succeeded but the result is degenerate or needed regularization."""


@dataclass(frozen=True)
class LinearTransform:
    """Affine map ``x -> matrix @ x + offset``."""

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        a = np.array(self.matrix, dtype=np.float64)
        b = np.array(self.offset, dtype=np.float64).reshape(-1)
        if a.ndim != 2 or a.shape[0] != b.shape[0]:
            raise DataError(f"matrix {a.shape} does not match offset {b.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise DataError("transform entries must be finite")
        a.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "matrix", a)
        object.__setattr__(self, "offset", b)

    @property
    def in_dim(self):
        return self.matrix.shape[1]

    @property
    def out_dim(self):
        return self.matrix.shape[0]

    @classmethod
    def identity(cls, dim: int) -> "LinearTransform":
        return cls(np.eye(dim), np.zeros(dim))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DataError(f"transform expects dim {self.in_dim}, got {x.shape[-1]}")
        return x @ self.matrix.T + self.offset

    def then(self, other: "LinearTransform") -> "LinearTransform":
        """The transform equivalent to applying ``self`` and then ``other``."""
        if other.in_dim != self.out_dim:
            raise DataError(f"cannot chain dim {self.out_dim} into {other.in_dim}")
        return LinearTransform(other.matrix @ self.matrix, other.matrix @ self.offset + other.offset)

    def to_bytes(self) -> bytes:
        return pack_matrices(b"LTX1", (self.out_dim, self.in_dim), (self.matrix, self.offset))

    @classmethod
    def from_bytes(cls, data: bytes, path=None) -> "LinearTransform":
        _, (a, b) = unpack_matrices(data, b"LTX1", 2, lambda o, i: [(o, i), (o,)], path)
        return cls(a, b)


def compose(*transforms: LinearTransform) -> LinearTransform:
    out = transforms[0]
    for t in transforms[1:]:
        out = out.then(t)
    return out


def apply_transform(t: LinearTransform, es: EmbeddingSet) -> EmbeddingSet:
    if es.dim != t.in_dim:
        raise DataError(f"transform expects dim {t.in_dim}, embeddings have dim {es.dim}")
    return es.with_vectors(t(es.vectors))


def _nonempty(es: EmbeddingSet, what="embedding set"):
    if len(es) == 0:
        raise DataError(f"{what} is empty")


def fit_center(es: EmbeddingSet) -> LinearTransform:
    _nonempty(es)
    return LinearTransform(np.eye(es.dim), -es.vectors.mean(axis=0))


def fit_whitener(es: EmbeddingSet, ridge: float = 0.0) -> LinearTransform:
    """Centering plus symmetric inverse square root of ``cov + ridge*I``."""
    _nonempty(es)
    if ridge < 0:
        raise DataError("ridge must be nonnegative")
    mean = es.vectors.mean(axis=0)
    cov = covariance(es.vectors) + ridge * np.eye(es.dim)
    try:
        a = sym_power(cov, -0.5, floor=1e-14 * max(np.trace(cov), 1e-300))
    except np.linalg.LinAlgError as e:
        raise DataError(f"covariance not positive definite: {e}") from None
    return LinearTransform(a, -a @ mean)


def class_scatter(x: np.ndarray, labels: np.ndarray):
    """Return (mean, within, between) scatter matrices, each normalized by n."""
    classes, inv, counts = np.unique(labels, return_inverse=True, return_counts=True)
    n, d = x.shape
    mean = x.mean(axis=0)
    sums = np.zeros((len(classes), d))
    np.add.at(sums, inv, x)
    means = sums / counts[:, None]
    xc = x - means[inv]
    sw = sym(xc.T @ xc / n)
    mc = (means - mean) * np.sqrt(counts)[:, None]
    sb = sym(mc.T @ mc / n)
    return mean, sw, sb, len(classes)


def fit_lda(es: EmbeddingSet, out_dim: int, ridge_scale: float = 1e-6) -> LinearTransform:
    """Fisher LDA projecting onto the top ``out_dim`` generalized eigenvectors.

    Solves ``Sb v = lambda Sw v`` with a ridge of ``ridge_scale * trace(Sw) / dim``
    added to ``Sw``.  Rows of the returned matrix are normalized so that the
    projected within-class covariance is the identity; the offset centers the
    projected data.
    """
    _nonempty(es)
    x = es.vectors
    mean, sw, sb, n_classes = class_scatter(x, es.label_array())
    if n_classes < 2:
        raise DataError("LDA needs at least two classes")
    if not 1 <= out_dim <= min(es.dim, n_classes - 1):
        raise DataError(
            f"out_dim {out_dim} exceeds min(dim={es.dim}, n_classes-1={n_classes - 1})")
    d = es.dim
    sw = sw + ridge_scale * max(np.trace(sw), 1e-300) / d * np.eye(d)
    w, v = scipy.linalg.eigh(sb, sw, subset_by_index=[d - out_dim, d - 1])
    order = np.argsort(w)[::-1]
    w, v = w[order], fix_signs(v[:, order])
    if w[0] <= 1e-10 * max(1.0, np.trace(sb)):
        warnings.warn("LDA between-class scatter is (numerically) zero; "
                      "directions are arbitrary", DegenerateWarning, stacklevel=2)
    a = v.T
    return LinearTransform(a, -a @ mean)


def length_normalize(x: np.ndarray) -> np.ndarray:
    """Scale each row (or a single vector) to unit Euclidean norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("cannot length-normalize a zero vector")
    return x / norms


def length_normalize_set(es: EmbeddingSet) -> EmbeddingSet:
    return es.with_vectors(length_normalize(es.vectors))


def _regularized_cov(x: np.ndarray, what: str) -> np.ndarray:
    cov = covariance(x)
    d = cov.shape[0]
    w = np.linalg.eigvalsh(cov)
    if w.min() <= 1e-10 * max(w.max(), 1e-300):
        warnings.warn(f"{what} covariance is rank deficient; adding ridge",
                      DegenerateWarning, stacklevel=3)
        cov = cov + (1e-6 * max(np.trace(cov), 1.0) / d) * np.eye(d)
    return cov


def fit_coral(out_domain: EmbeddingSet, in_domain: EmbeddingSet, weight: float = 0.5) -> LinearTransform:
    """CORAL toward a blend of the two domains' second-order statistics.

    The matrix is ``C_blend^{1/2} C_out^{-1/2}`` with
    ``C_blend = (1 - weight) C_out + weight C_in``; the offset moves the
    out-of-domain mean onto the blended mean.
    """
    _nonempty(out_domain, "out-of-domain set")
    _nonempty(in_domain, "in-domain set")
    if out_domain.dim != in_domain.dim:
        raise DataError("domains have different dimensions")
    if not 0.0 <= weight <= 1.0:
        raise DataError("weight must be in [0, 1]")
    c_out = _regularized_cov(out_domain.vectors, "out-of-domain")
    c_in = _regularized_cov(in_domain.vectors, "in-domain")
    c_blend = (1.0 - weight) * c_out + weight * c_in
    a = sym_power(c_blend, 0.5) @ sym_power(c_out, -0.5)
    m_out = out_domain.vectors.mean(axis=0)
    m_blend = (1.0 - weight) * m_out + weight * in_domain.vectors.mean(axis=0)
    return LinearTransform(a, m_blend - a @ m_out)


def stack_embeddings(sets: Sequence[EmbeddingSet]) -> EmbeddingSet:
    """Concatenate per-segment vectors across systems, in list order.

    Metadata is taken from the first set.
    """
    if not sets:
        raise DataError("nothing to stack")
    first = sets[0]
    ref = set(first.ids)
    for k, es in enumerate(sets[1:], start=1):
        other = set(es.ids)
        if other != ref:
            missing = sorted(ref - other)[:5] + sorted(other - ref)[:5]
            raise DataError(f"set {k} has a different segment inventory; e.g. {missing}")
    blocks = [first.vectors] + [es.vectors[[es.index_of(s) for s in first.ids]].reshape(len(first), es.dim)
                                for es in sets[1:]]
    return first.with_vectors(np.concatenate(blocks, axis=1))


@dataclass
class PipelineConfig:
    center: bool = True
    coral_weight: float | None = None
    whiten: bool = True
    lda_dim: int | None = None
    length_norm: bool = True
    whiten_ridge: float = 0.0


@dataclass
class Pipeline:
    """Fitted chain center -> CORAL -> whiten -> LDA, then optional length norm."""

    transform: LinearTransform
    length_norm: bool = True
    stages: list = field(default_factory=list)

    def apply(self, es: EmbeddingSet) -> EmbeddingSet:
        out = apply_transform(self.transform, es)
        return length_normalize_set(out) if self.length_norm else out


def fit_pipeline(train: EmbeddingSet, config: PipelineConfig,
                 in_domain: EmbeddingSet | None = None) -> Pipeline:
    t = LinearTransform.identity(train.dim)
    stages = []
    cur = train

    def push(name, step):
        nonlocal t, cur
        t = t.then(step)
        cur = apply_transform(step, cur)
        stages.append(name)

    if config.center:
        push("center", fit_center(cur))
    if config.coral_weight is not None:
        if in_domain is None:
            raise DataError("CORAL needs an in-domain set")
        push("coral", fit_coral(cur, apply_transform(t, in_domain), config.coral_weight))
    if config.whiten:
        push("whiten", fit_whitener(cur, config.whiten_ridge))
    if config.lda_dim is not None:
        push("lda", fit_lda(cur, config.lda_dim))
    if config.length_norm:
        stages.append("length_norm")
    return Pipeline(t, config.length_norm, stages)
