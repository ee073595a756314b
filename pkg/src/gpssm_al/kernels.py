"""Stationary covariance functions and their Gaussian-input expectations.

The matrix helpers take an ``xp`` argument so the same formulas serve both
the numpy code paths and the jitted JAX objective in :mod:`gpssm_al.elbo`.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.linalg as sla

from .numerics import DimensionMismatch, as_matrix, as_vector, cholesky

SQRT3 = float(np.sqrt(3.0))


class KernelFamily(str, Enum):
    SE = "se"
    MATERN32 = "matern32"

    @classmethod
    def parse(cls, name: "str | KernelFamily") -> "KernelFamily":
        if isinstance(name, KernelFamily):
            return name
        key = name.strip().lower().replace("-", "").replace("_", "").replace(" ", "")
        aliases = {
            "se": cls.SE,
            "rbf": cls.SE,
            "squaredexponential": cls.SE,
            "matern32": cls.MATERN32,
            "matérn32": cls.MATERN32,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown kernel family {name!r}") from None


class UnsupportedKernel(ValueError):
    pass


class DimensionTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    """One GP covariance: family, signal variance and ARD lengthscales."""

    family: KernelFamily
    signal_variance: float
    lengthscales: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "family", KernelFamily.parse(self.family))
        ls = as_vector(self.lengthscales)
        if not self.signal_variance > 0:
            raise ValueError("signal variance must be positive")
        if np.any(ls <= 0) or not np.all(np.isfinite(ls)):
            raise ValueError("lengthscales must be positive and finite")
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "lengthscales", ls)

    @property
    def input_dim(self) -> int:
        return self.lengthscales.size

    @classmethod
    def isotropic(cls, family, signal_variance: float, lengthscale: float, input_dim: int):
        """ARD kernel with every lengthscale set to the same scalar."""
        return cls(family, signal_variance, np.full(input_dim, float(lengthscale)))


def scaled_sqdist(X, Y, lengthscales, xp=np):
    Xs = X / lengthscales
    Ys = Y / lengthscales
    d2 = (
        xp.sum(Xs * Xs, axis=-1)[..., :, None]
        + xp.sum(Ys * Ys, axis=-1)[..., None, :]
        - 2.0 * Xs @ xp.swapaxes(Ys, -1, -2)
    )
    return xp.maximum(d2, 0.0)


def kernel_matrix(family: KernelFamily, signal_variance, lengthscales, X, Y, xp=np):
    """Cross-covariance ``k(X_i, Y_j)`` for arrays of shape (..., n, d), (..., m, d)."""
    d2 = scaled_sqdist(X, Y, lengthscales, xp)
    if family is KernelFamily.SE:
        return signal_variance * xp.exp(-0.5 * d2)
    positive = d2 > 0.0
    r = xp.where(positive, xp.sqrt(xp.where(positive, d2, 1.0)), 0.0)
    return signal_variance * (1.0 + SQRT3 * r) * xp.exp(-SQRT3 * r)


def _as_points(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, dim) if dim == 1 else X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimensionMismatch(f"points of shape {X.shape} do not match input dim {dim}")
    if X.shape[0] == 0:
        raise ValueError("need at least one input point")
    return X


def kernel_eval(k: KernelSpec, a, b) -> float:
    a = as_vector(a)
    b = as_vector(b)
    if a.size != k.input_dim or b.size != k.input_dim:
        raise DimensionMismatch(
            f"inputs of length {a.size}/{b.size} for a kernel over {k.input_dim} dims"
        )
    return float(
        kernel_matrix(k.family, k.signal_variance, k.lengthscales, a[None, :], b[None, :])[0, 0]
    )


def gram(k: KernelSpec, X, Y=None) -> np.ndarray:
    X = _as_points(X, k.input_dim)
    Y = X if Y is None else _as_points(Y, k.input_dim)
    K = kernel_matrix(k.family, k.signal_variance, k.lengthscales, X, Y)
    if Y is X:
        K = 0.5 * (K + K.T)
    return K


# ---------------------------------------------------------------------------
# Expectations under a Gaussian input  x ~ N(u, S)
# ---------------------------------------------------------------------------


def _check_input_dist(k: KernelSpec, u, S, X):
    u = as_vector(u)
    S = as_matrix(S)
    if u.size != k.input_dim or S.shape != (u.size, u.size):
        raise DimensionMismatch(
            f"input distribution of dim {u.size}/{S.shape} for a kernel over {k.input_dim} dims"
        )
    return u, S, _as_points(X, k.input_dim)


def _quad_forms(P: np.ndarray, D: np.ndarray):
    """Return (logdet P, D^T P^-1 D row-wise) for SPD ``P``."""
    L = cholesky(P)
    W = sla.solve_triangular(L, D.T, lower=True)
    return 2.0 * np.sum(np.log(np.diag(L))), np.sum(W * W, axis=0)


def _se_l_vec(k: KernelSpec, u, S, X) -> np.ndarray:
    lam = k.lengthscales**2
    logdet1, q1 = _quad_forms(np.diag(lam) + S, u[None, :] - X)
    return k.signal_variance * np.exp(0.5 * (np.sum(np.log(lam)) - logdet1) - 0.5 * q1)


def se_kernel_expectations(k: KernelSpec, u, S, X):
    """Closed-form ``(E[k(x,x)], E[k(x,X_i)], E[k(x,X_i) k(x,X_j)])`` for SE kernels.

    ``S`` may be singular (e.g. zero variance on control dimensions); only
    ``Lambda + S`` and ``Lambda / 2 + S`` need to be positive definite.
    """
    if k.family is not KernelFamily.SE:
        raise UnsupportedKernel(f"closed-form expectations need an SE kernel, got {k.family.value}")
    u, S, X = _check_input_dist(k, u, S, X)
    lam = k.lengthscales**2
    s2 = k.signal_variance
    logdet_lam = float(np.sum(np.log(lam)))

    l_vec = _se_l_vec(k, u, S, X)

    n = X.shape[0]
    diff = (X[:, None, :] - X[None, :, :]).reshape(n * n, -1)
    mid = 0.5 * (X[:, None, :] + X[None, :, :]).reshape(n * n, -1)
    pair = np.sum(diff * diff / lam, axis=1)
    half = np.diag(0.5 * lam)
    logdet2, q2 = _quad_forms(half + S, u[None, :] - mid)
    log_half = logdet_lam - X.shape[1] * np.log(2.0)
    L_mat = s2 * s2 * np.exp(0.5 * (log_half - logdet2) - 0.25 * pair - 0.5 * q2)
    L_mat = L_mat.reshape(n, n)
    return s2, l_vec, 0.5 * (L_mat + L_mat.T)


def se_cross_expectation(k: KernelSpec, u, S, X) -> np.ndarray:
    """``E[x k(x, X_i)]`` for an SE kernel, shape (n, d)."""
    if k.family is not KernelFamily.SE:
        raise UnsupportedKernel("closed-form cross expectation needs an SE kernel")
    u, S, X = _check_input_dist(k, u, S, X)
    L = cholesky(np.diag(k.lengthscales**2) + S)
    # mean of the tilted Gaussian N(x|u,S) k(x,x_i): u + S (Lambda+S)^-1 (x_i - u)
    shift = sla.cho_solve((L, True), (X - u).T).T @ S.T
    return _se_l_vec(k, u, S, X)[:, None] * (u[None, :] + shift)


MC_FALLBACK_SAMPLES = 100_000
MAX_QUADRATURE_DIM = 4


def gaussian_quadrature_rule(u, S, nodes: int, seed: int = 0, allow_mc: bool = True):
    """Points and weights approximating expectations under ``N(u, S)``.

    Gauss-Hermite tensor product over the dimensions with non-zero variance;
    dimensions with zero variance are held fixed at the mean. Above four
    active dimensions a seeded Monte-Carlo rule is returned instead, or
    :class:`DimensionTooLarge` is raised when ``allow_mc`` is false.
    """
    u = as_vector(u)
    S = as_matrix(S)
    active = np.flatnonzero(np.diag(S) > 0.0)
    if active.size == 0:
        return u[None, :].copy(), np.ones(1)
    L = cholesky(S[np.ix_(active, active)])
    if active.size > MAX_QUADRATURE_DIM:
        if not allow_mc:
            raise DimensionTooLarge(f"{active.size} random dimensions exceed the tensor-quadrature limit")
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((MC_FALLBACK_SAMPLES, active.size))
        w = np.full(MC_FALLBACK_SAMPLES, 1.0 / MC_FALLBACK_SAMPLES)
    else:
        t, wt = np.polynomial.hermite.hermgauss(nodes)
        grids = np.meshgrid(*([t] * active.size), indexing="ij")
        z = np.sqrt(2.0) * np.stack([g.ravel() for g in grids], axis=1)
        wgrid = np.meshgrid(*([wt] * active.size), indexing="ij")
        w = np.prod(np.stack([g.ravel() for g in wgrid], axis=1), axis=1) / np.pi ** (active.size / 2)
    pts = np.repeat(u[None, :], z.shape[0], axis=0)
    pts[:, active] += z @ L.T
    return pts, w


def quadrature_kernel_expectations(
    k: KernelSpec, u, S, X, nodes: int = 32, seed: int = 0, cross: bool = False,
    allow_mc: bool = True,
):
    """Numerical version of :func:`se_kernel_expectations` for any family.

    With ``cross=True`` a fourth element ``E[x k(x, X_i)]`` is returned.
    """
    if nodes < 16:
        raise ValueError("tensor quadrature needs at least 16 nodes per dimension")
    u, S, X = _check_input_dist(k, u, S, X)
    pts, w = gaussian_quadrature_rule(u, S, nodes, seed, allow_mc)
    kx = kernel_matrix(k.family, k.signal_variance, k.lengthscales, pts, X)  # (q, n)
    l_vec = w @ kx
    L_mat = (kx * w[:, None]).T @ kx
    out = (k.signal_variance, l_vec, 0.5 * (L_mat + L_mat.T))
    if cross:
        return out + ((kx * w[:, None]).T @ pts,)
    return out


def kernel_expectations(k: KernelSpec, u, S, X, nodes: int = 32, seed: int = 0):
    """Dispatch to the closed form for SE kernels, quadrature otherwise.

    Returns ``(l, l_vec, L_mat, cross)`` with ``cross = E[x k(x, X_i)]``.
    """
    if k.family is KernelFamily.SE:
        l, lv, Lm = se_kernel_expectations(k, u, S, X)
        return l, lv, Lm, se_cross_expectation(k, u, S, X)
    return quadrature_kernel_expectations(k, u, S, X, nodes=nodes, seed=seed, cross=True)
