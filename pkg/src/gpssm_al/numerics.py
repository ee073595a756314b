"""Dense linear algebra and Gaussian helpers shared across the package.

Everything is float64. Matrices are plain ``numpy.ndarray`` objects; the
:class:`GaussianDist` container only adds validation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

LOG_2PI = float(np.log(2.0 * np.pi))

JITTER_START = 1e-10
JITTER_MAX = 1e-4


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky factorisation fails even after jitter escalation."""


class DimensionMismatch(ValueError):
    pass


def as_matrix(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = np.diag(a) if a.size > 1 else a.reshape(1, 1)
    return a


def as_vector(x) -> np.ndarray:
    return np.atleast_1d(np.asarray(x, dtype=np.float64))


def cholesky(a, jitter: bool = True) -> np.ndarray:
    """Lower Cholesky factor of a symmetric matrix.

    On failure the diagonal is inflated by ``1e-10 * mean(diag)``, growing by
    a factor of ten per attempt up to ``1e-4 * mean(diag)``.

    Raises
    ------
    NotPositiveDefinite
        If the matrix is still not positive definite at the largest jitter,
        or ``jitter=False`` and the plain factorisation fails.
    """
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cholesky needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NotPositiveDefinite("matrix has non-finite entries")
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        if not jitter:
            raise NotPositiveDefinite("matrix is not positive definite") from None
    scale = float(np.mean(np.diag(a)))
    if scale <= 0.0:
        raise NotPositiveDefinite("non-positive mean diagonal")
    eye = np.eye(a.shape[0])
    level = JITTER_START
    while level <= JITTER_MAX * (1 + 1e-12):
        try:
            return np.linalg.cholesky(a + level * scale * eye)
        except np.linalg.LinAlgError:
            level *= 10.0
    raise NotPositiveDefinite(f"matrix not positive definite after jitter {JITTER_MAX:g}")


def chol_solve(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    return sla.cho_solve((L, True), b)


def logdet_from_chol(L: np.ndarray) -> float:
    return 2.0 * float(np.sum(np.log(np.diag(L))))


@dataclass(frozen=True)
class GaussianDist:
    """Multivariate normal ``N(mean, cov)``."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = as_vector(self.mean)
        cov = as_matrix(self.cov)
        if cov.shape != (mean.size, mean.size):
            raise DimensionMismatch(f"mean has length {mean.size} but cov is {cov.shape}")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValueError("GaussianDist entries must be finite")
        scale = max(float(np.max(np.abs(cov))), 1e-300)
        if np.max(np.abs(cov - cov.T)) > 1e-10 * scale:
            raise ValueError("covariance is not symmetric")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def chol(self) -> np.ndarray:
        return cholesky(self.cov)


def gaussian_logpdf(x, g: GaussianDist) -> float:
    """``log N(x | g.mean, g.cov)``."""
    x = as_vector(x)
    if x.size != g.dim:
        raise DimensionMismatch(f"x has length {x.size}, distribution has dim {g.dim}")
    L = g.chol()
    alpha = sla.solve_triangular(L, x - g.mean, lower=True)
    return float(-0.5 * (g.dim * LOG_2PI + logdet_from_chol(L) + alpha @ alpha))


def gaussian_kl(q: GaussianDist, p: GaussianDist) -> float:
    """``KL[q || p]`` between two multivariate normals."""
    if q.dim != p.dim:
        raise DimensionMismatch(f"KL between dims {q.dim} and {p.dim}")
    Lq = q.chol()
    Lp = p.chol()
    # tr(P^-1 Q) via ||Lp^-1 Lq||_F^2
    W = sla.solve_triangular(Lp, Lq, lower=True)
    diff = sla.solve_triangular(Lp, p.mean - q.mean, lower=True)
    kl = 0.5 * (
        float(np.sum(W * W))
        + float(diff @ diff)
        - q.dim
        + logdet_from_chol(Lp)
        - logdet_from_chol(Lq)
    )
    return kl


def gaussian_entropy(cov) -> float:
    """Differential entropy ``0.5 * logdet(2 pi e cov)``."""
    cov = as_matrix(cov)
    L = cholesky(cov)
    n = cov.shape[0]
    return 0.5 * (n * (LOG_2PI + 1.0) + logdet_from_chol(L))


def diag_gaussian_logpdf(x: np.ndarray, mean: np.ndarray, var: np.ndarray) -> np.ndarray:
    """Vectorised log density of independent normals, summed over the last axis."""
    r = x - mean
    return -0.5 * np.sum(LOG_2PI + np.log(var) + r * r / var, axis=-1)
