"""Small symmetric-matrix helpers shared by the transforms and back-ends."""
from __future__ import annotations

import numpy as np


def sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def eigh_sorted(a: np.ndarray):
    """Eigendecomposition with eigenvalues descending and a fixed sign convention.

    Each eigenvector is flipped so that its largest-magnitude component is
    nonnegative.
    """
    w, v = np.linalg.eigh(sym(a))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    return w, fix_signs(v)


def fix_signs(v: np.ndarray) -> np.ndarray:
    rows = np.argmax(np.abs(v), axis=0)
    signs = np.where(v[rows, np.arange(v.shape[1])] < 0, -1.0, 1.0)
    return v * signs


def sym_power(a: np.ndarray, p: float, floor: float = 0.0) -> np.ndarray:
    """Symmetric matrix power via eigendecomposition.

    Raises ``np.linalg.LinAlgError`` if an eigenvalue is <= ``floor`` and the
    power is negative.
    """
    w, v = eigh_sorted(a)
    if p < 0 and w.min() <= floor:
        raise np.linalg.LinAlgError(f"matrix not positive definite (min eigenvalue {w.min():.3g})")
    w = np.clip(w, 0.0, None)
    return sym((v * w ** p) @ v.T)


def covariance(x: np.ndarray) -> np.ndarray:
    """Maximum-likelihood (1/n) covariance of the rows of ``x``."""
    xc = x - x.mean(axis=0)
    return sym(xc.T @ xc / x.shape[0])


def logdet(a: np.ndarray) -> float:
    sign, ld = np.linalg.slogdet(a)
    if sign <= 0:
        raise np.linalg.LinAlgError("matrix not positive definite")
    return float(ld)
