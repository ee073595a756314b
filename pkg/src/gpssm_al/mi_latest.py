"""Latest mutual information via moment matching through the sparse GP.

The belief over ``f_t`` is a Gaussian with diagonal covariance (the latent
GPs are independent). Each step feeds ``N(M_{t-1}, V_{t-1} + Q)`` together
with the known control into the GP and matches the first two moments of
the output exactly, using kernel expectations under the Gaussian input.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import kernel_expectations
from .model import GpssmModel, Trajectory, emission_noise
from .numerics import DimensionMismatch, as_matrix, as_vector, cholesky, logdet_from_chol

DEFAULT_NODES = 32


@dataclass(frozen=True)
class MomentBelief:
    """Gaussian summary ``N(M_t, V_t)`` of the transition output ``f_t``."""

    t: int
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = as_vector(self.mean)
        var = as_matrix(self.var)
        if var.shape != (mean.size, mean.size):
            raise DimensionMismatch("belief mean and variance disagree in size")
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise ValueError("belief must be finite")
        if np.min(np.linalg.eigvalsh(0.5 * (var + var.T))) < -1e-10 * max(1.0, float(np.max(np.abs(var)))):
            raise ValueError("belief variance is not positive semi-definite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)


def moment_match(model: GpssmModel, u, S, nodes: int = DEFAULT_NODES):
    """Mean and diagonal variance of ``f(x~)`` for ``x~ ~ N(u, S)`` over the augmented input.

    Returns ``(M, V)`` with ``V`` a vector of per-dim variances.
    """
    u = as_vector(u)
    S = as_matrix(S)
    if u.size != model.d_in:
        raise DimensionMismatch(f"input mean has length {u.size}, model expects {model.d_in}")
    post = model.posterior
    Z = model.inducing.Z
    F, a = model.mean_weights, model.mean_offset
    M = np.empty(model.d_x)
    V = np.empty(model.d_x)
    for j, k in enumerate(model.kernels):
        l, lv, Lm, cross = kernel_expectations(k, u, S, Z, nodes=nodes)
        beta, B = post.beta[j], post.B[j]
        Fj = F[j]
        bl = beta @ lv
        M[j] = Fj @ u + a[j] + bl
        var = (
            l
            - np.sum(B * Lm)
            + beta @ Lm @ beta
            - bl * bl
            + Fj @ S @ Fj
            + 2.0 * beta @ (cross @ Fj - (Fj @ u) * lv)
        )
        V[j] = max(float(var), 0.0)
    return M, V


def _augmented_input(model: GpssmModel, mean, cov, c):
    c = np.zeros(0) if c is None else as_vector(c)
    if c.size != model.d_c:
        raise DimensionMismatch(f"control has length {c.size}, model expects {model.d_c}")
    u = np.concatenate([as_vector(mean), c])
    S = np.zeros((model.d_in, model.d_in))
    S[: model.d_x, : model.d_x] = as_matrix(cov)
    return u, S


def init_belief(model: GpssmModel, c0, nodes: int = DEFAULT_NODES) -> MomentBelief:
    """Belief over ``f_1`` from ``x_0 ~ N(mu_0, Sigma_0)`` and the first control."""
    u, S = _augmented_input(model, model.x0_prior.mean, model.x0_prior.cov, c0)
    M, V = moment_match(model, u, S, nodes)
    return MomentBelief(1, M, np.diag(V))


def propagate(model: GpssmModel, belief: MomentBelief, c_next, nodes: int = DEFAULT_NODES) -> MomentBelief:
    """One recursion step with input ``N(M, V + Q)`` and the control held fixed."""
    u, S = _augmented_input(model, belief.mean, belief.var + model.Q, c_next)
    M, V = moment_match(model, u, S, nodes)
    return MomentBelief(belief.t + 1, M, np.diag(V))


def latest_mi(model: GpssmModel, belief: MomentBelief) -> float:
    """``0.5 log det(R + C (V + Q) C^T) / det(R + C Q C^T)``."""
    base = emission_noise(model)
    full = model.R + model.C @ (belief.var + model.Q) @ model.C.T
    return 0.5 * (logdet_from_chol(cholesky(full)) - logdet_from_chol(cholesky(base)))


def belief_after(model: GpssmModel, controls, nodes: int = DEFAULT_NODES) -> MomentBelief:
    """Run the recursion from ``x_0`` through every control in ``controls``."""
    controls = np.asarray(controls, dtype=np.float64).reshape(-1, model.d_c)
    if len(controls) == 0:
        raise ValueError("need at least one control")
    belief = init_belief(model, controls[0], nodes)
    for c in controls[1:]:
        belief = propagate(model, belief, c, nodes)
    return belief


def latest_mi_score(model: GpssmModel, traj: Trajectory, candidate, nodes: int = DEFAULT_NODES) -> float:
    """latMI of the candidate control after replaying the trajectory's controls.

    The whole recursion is recomputed from the initial state for every
    candidate.
    """
    controls = np.vstack([traj.c, np.atleast_2d(as_vector(candidate))])
    return latest_mi(model, belief_after(model, controls, nodes))
