"""Total mutual information from per-sample ELBO bounds.

For one draw ``s`` of the variational state path, with transition outputs
``f_i`` sampled from the sparse GP along the path,

    i_s = sum_i log N(y_i | C f_i + d, R + C Q C^T) - L_s

where the candidate step contributes the predicted observation
``y_{t+1} = C f_{t+1} + d`` and ``L_s`` is the single-path ELBO on the
extended sequence, evaluated with the same draws.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from .elbo import _elbo_terms, _sample_paths, _sparse_predict, pack, padded_length
from .model import GpssmModel, Trajectory, VariationalChain
from .numerics import LOG_2PI, as_vector

DEFAULT_SAMPLES = 32


def _bounds(family, params, fixed, y, c, mask, T, cand, has_cand, eps0, eps, eps_f):
    """i_s for every sample (rows of the eps arrays)."""
    n, P, _ = eps.shape
    C, d = fixed["C"], fixed["d"]
    step = jnp.arange(P) == T
    take = jnp.logical_and(step, has_cand)
    c_ext = jnp.where(take[:, None], cand[None, :], c)
    m_ext = mask + take.astype(mask.dtype)

    y_b = jnp.broadcast_to(y, (n,) + y.shape)
    x, _, _, _ = _sample_paths(params, fixed, y_b, eps0, eps)
    inputs = jnp.concatenate([x[:, :-1], jnp.broadcast_to(c_ext, (n,) + c_ext.shape)], axis=-1)
    fm, fv = _sparse_predict(family, params, fixed, inputs.reshape(n * P, -1))
    f = fm.reshape(n, P, -1) + jnp.sqrt(fv.reshape(n, P, -1)) * eps_f
    y_hat = f @ C.T + d  # noiseless-emission mean given the sampled f
    y_s = jnp.where(take[None, :, None], y_hat, y_b)

    q = jnp.exp(params["log_q"])
    r = jnp.exp(params["log_r"])
    Ly = jnp.linalg.cholesky(jnp.diag(r) + (C * q[None, :]) @ C.T)
    resid = y_s - y_hat
    w = jax.scipy.linalg.solve_triangular(Ly, jnp.moveaxis(resid, -1, 0).reshape(C.shape[0], -1),
                                          lower=True)
    w = w.reshape((C.shape[0],) + resid.shape[:-1])
    logdet = 2.0 * jnp.sum(jnp.log(jnp.diag(Ly)))
    lp = -0.5 * (C.shape[0] * LOG_2PI + logdet + jnp.sum(w * w, axis=0))
    numer = jnp.sum(lp * m_ext, axis=1)

    loglik, trans, x0_kl, u_kl = _elbo_terms(family, params, fixed, y_s, c_ext, m_ext, eps0, eps)
    return numer - (loglik - trans - x0_kl - u_kl)


def _bounds_batch(family, params, fixed, y, c, mask, T, cands, has_cand, eps0, eps, eps_f):
    """Candidates along the leading axis; the draws are shared between candidates."""
    return jax.vmap(lambda cd: _bounds(family, params, fixed, y, c, mask, T, cd, has_cand,
                                       eps0, eps, eps_f))(cands)


_bounds_jit = jax.jit(_bounds, static_argnums=0)
_bounds_batch_jit = jax.jit(_bounds_batch, static_argnums=0)


def draw_sample_noise(seed, T_pad: int, d_x: int):
    """``(eps0, eps_x, eps_f)`` for one sample, shapes (d_x,), (T_pad, d_x) twice."""
    rng = np.random.default_rng(seed)
    return (rng.standard_normal(d_x), rng.standard_normal((T_pad, d_x)),
            rng.standard_normal((T_pad, d_x)))


def sample_seeds(seed, S: int):
    return np.random.SeedSequence(seed).spawn(S)


def _stack_noise(seeds, P: int, d_x: int):
    draws = [draw_sample_noise(s, P, d_x) for s in seeds]
    return tuple(np.stack([dr[i] for dr in draws]) for i in range(3))


def _inputs(model: GpssmModel, traj: Trajectory, with_candidate: bool):
    if traj.y.shape[1] != model.d_y or traj.c.shape[1] != model.d_c:
        raise ValueError("trajectory dims do not match the model")
    T = traj.T
    P = padded_length(T + 1)
    y = np.zeros((P, model.d_y))
    c = np.zeros((P, model.d_c))
    mask = np.zeros(P)
    y[:T] = traj.y
    c[:T] = traj.c
    mask[:T] = 1.0
    return P, y, c, mask


@dataclass(frozen=True)
class TotalMiEstimate:
    value: float
    per_sample: np.ndarray = field(repr=False)
    S: int
    seed: object

    @property
    def std_error(self) -> float:
        if self.S < 2:
            return float("nan")
        return float(np.std(self.per_sample, ddof=1) / np.sqrt(self.S))


def per_sample_bound(model: GpssmModel, chain: VariationalChain | None, traj: Trajectory,
                     candidate, seed_s) -> float:
    """One ``i_s``. With ``candidate=None`` only the observed steps enter."""
    return float(_evaluate(model, traj, candidate, [seed_s])[0])


def _evaluate(model, traj, candidate, seeds):
    P, y, c, mask = _inputs(model, traj, candidate is not None)
    has = candidate is not None
    cand = as_vector(candidate) if has else np.zeros(model.d_c)
    if cand.size != model.d_c:
        raise ValueError(f"candidate has length {cand.size}, model expects {model.d_c}")
    params, fixed = pack(model)
    eps0, eps, eps_f = _stack_noise(seeds, P, model.d_x)
    out = _bounds_jit(model.family, params, fixed, y, c, mask, traj.T, cand, has, eps0, eps, eps_f)
    return np.asarray(out)


def total_mi(model: GpssmModel, chain: VariationalChain | None, traj: Trajectory, candidate,
             S: int = DEFAULT_SAMPLES, seed=0, chunk: int = 2048) -> TotalMiEstimate:
    """Average of ``S`` per-sample bounds whose seeds are spawned from ``seed``."""
    if S < 1:
        raise ValueError("S must be at least 1")
    seeds = sample_seeds(seed, S)
    vals = np.concatenate([_evaluate(model, traj, candidate, seeds[lo:lo + chunk])
                           for lo in range(0, S, chunk)])
    return TotalMiEstimate(float(np.mean(vals)), vals, S, seed)


class TotalMiScorer:
    """Scores many candidates against one model snapshot with shared draws.

    The per-sample noise and packed parameters are prepared once, so scoring
    a grid of candidates is a single compiled call.
    """

    def __init__(self, model: GpssmModel, traj: Trajectory, S: int = DEFAULT_SAMPLES, seed=0):
        self.model = model
        self.traj = traj
        self.S = S
        self.seed = seed
        self.P, self.y, self.c, self.mask = _inputs(model, traj, True)
        self.params, self.fixed = pack(model)
        self.noise = _stack_noise(sample_seeds(seed, S), self.P, model.d_x)

    def batch(self, candidates) -> np.ndarray:
        cands = np.asarray(candidates, dtype=np.float64).reshape(-1, self.model.d_c)
        out = _bounds_batch_jit(self.model.family, self.params, self.fixed, self.y, self.c,
                                self.mask, self.traj.T, cands, True, *self.noise)
        return np.mean(np.asarray(out), axis=1)

    def __call__(self, candidate) -> float:
        return float(self.batch(np.atleast_2d(as_vector(candidate)))[0])
