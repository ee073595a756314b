"""Monte-Carlo ELBO of the GPSSM and its maximisation with Adam.

The objective is written once in ``jax.numpy`` and compiled. All Gaussian
draws are generated from a numpy seed and passed in, so for a fixed seed
the estimate is a smooth deterministic function of the parameters.

Sequences are zero-padded to a multiple of :data:`BUCKET` with a step mask,
which keeps the number of distinct compiled shapes small while the data
set grows during active learning.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np
import optax

from .kernels import KernelSpec, kernel_matrix
from .model import GP_JITTER, GpssmModel, InducingSet, Trajectory, VariationalChain
from .numerics import LOG_2PI, GaussianDist

jax.config.update("jax_enable_x64", True)

BUCKET = 8
PARAM_GROUPS = ("kernel", "Z", "mu_u", "Sigma_u", "Q", "R", "qx0")


class NonFiniteGradient(FloatingPointError):
    pass


def padded_length(T: int) -> int:
    return max(BUCKET, BUCKET * math.ceil(T / BUCKET))


# ---------------------------------------------------------------------------
# Parameter packing
# ---------------------------------------------------------------------------


def _chol_to_free(L):
    L = np.asarray(L)
    return np.tril(L, -1), np.log(np.diagonal(L, axis1=-2, axis2=-1))


def _free_to_chol(off, logdiag, xp=jnp):
    n = off.shape[-1]
    return xp.tril(off, -1) + xp.exp(logdiag)[..., None] * xp.eye(n)


def pack(model: GpssmModel):
    """Split a model into unconstrained trainable arrays and fixed arrays."""
    Lu_off, Lu_logdiag = _chol_to_free(model.inducing.chol)
    L0_off, L0_logdiag = _chol_to_free(model.qx0.chol())
    params = {
        "log_s2": np.log([k.signal_variance for k in model.kernels]),
        "log_ls": np.log(np.stack([k.lengthscales for k in model.kernels])),
        "Z": model.inducing.Z.copy(),
        "mu_u": model.inducing.mean.copy(),
        "Lu_off": Lu_off,
        "Lu_logdiag": Lu_logdiag,
        "log_q": np.log(model.q_diag),
        "log_r": np.log(model.r_diag),
        "m0": model.qx0.mean.copy(),
        "L0_off": L0_off,
        "L0_logdiag": L0_logdiag,
    }
    fixed = {
        "C": model.C,
        "d": model.d,
        "F": model.mean_weights,
        "a": model.mean_offset,
        "p0_mean": model.x0_prior.mean,
        "p0_chol": model.x0_prior.chol(),
    }
    return params, fixed


_GROUP_KEYS = {
    "kernel": ("log_s2", "log_ls"),
    "Z": ("Z",),
    "mu_u": ("mu_u",),
    "Sigma_u": ("Lu_off", "Lu_logdiag"),
    "Q": ("log_q",),
    "R": ("log_r",),
    "qx0": ("m0", "L0_off", "L0_logdiag"),
}


def unpack(model: GpssmModel, params, trainable=PARAM_GROUPS) -> GpssmModel:
    """Write the trainable groups of ``params`` back into ``model``.

    Frozen groups keep the original arrays, so a fully frozen model comes
    back bit-identical.
    """
    p = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    changes = {}
    if "kernel" in trainable:
        changes["kernels"] = tuple(
            KernelSpec(k.family, float(np.exp(p["log_s2"][j])), np.exp(p["log_ls"][j]))
            for j, k in enumerate(model.kernels)
        )
    if {"Z", "mu_u", "Sigma_u"} & set(trainable):
        ind = model.inducing
        changes["inducing"] = InducingSet(
            p["Z"] if "Z" in trainable else ind.Z,
            p["mu_u"] if "mu_u" in trainable else ind.mean,
            _free_to_chol(p["Lu_off"], p["Lu_logdiag"], np) if "Sigma_u" in trainable else ind.chol,
        )
    if "Q" in trainable:
        changes["q_diag"] = np.exp(p["log_q"])
    if "R" in trainable:
        changes["r_diag"] = np.exp(p["log_r"])
    if "qx0" in trainable:
        L0 = _free_to_chol(p["L0_off"], p["L0_logdiag"], np)
        changes["qx0"] = GaussianDist(p["m0"], L0 @ L0.T)
    return model.with_params(**changes) if changes else model


# ---------------------------------------------------------------------------
# JAX objective
# ---------------------------------------------------------------------------


def _kzz_chol(family, s2, ls, Z):
    K = kernel_matrix(family, s2, ls, Z, Z, xp=jnp)
    K = 0.5 * (K + K.T) + GP_JITTER * s2 * jnp.eye(Z.shape[0])
    return jnp.linalg.cholesky(K)


def _sparse_predict(family, params, fixed, X):
    """Per-dim predictive mean and variance of f at rows of ``X``; (n, d_x) each."""
    Z = params["Z"]
    prior_X = X @ fixed["F"].T + fixed["a"]
    prior_Z = Z @ fixed["F"].T + fixed["a"]
    Lu = _free_to_chol(params["Lu_off"], params["Lu_logdiag"])

    def one(log_s2, log_ls, mu, Lu_j, mz):
        s2 = jnp.exp(log_s2)
        ls = jnp.exp(log_ls)
        Lk = _kzz_chol(family, s2, ls, Z)
        Kzx = kernel_matrix(family, s2, ls, Z, X, xp=jnp)
        W = jax.scipy.linalg.solve_triangular(Lk, Kzx, lower=True)
        KinvK = jax.scipy.linalg.solve_triangular(Lk.T, W, lower=False)  # K^-1 k, (M, n)
        beta = jax.scipy.linalg.cho_solve((Lk, True), mu - mz)
        U = Lu_j.T @ KinvK
        mean = Kzx.T @ beta
        var = s2 - jnp.sum(W * W, axis=0) + jnp.sum(U * U, axis=0)
        return mean, jnp.maximum(var, 0.0)

    mean, var = jax.vmap(one, in_axes=(0, 0, 0, 0, 1))(
        params["log_s2"], params["log_ls"], params["mu_u"], Lu, prior_Z
    )
    return prior_X + mean.T, var.T


def _kl_gauss_chol(m_q, L_q, m_p, L_p):
    W = jax.scipy.linalg.solve_triangular(L_p, L_q, lower=True)
    r = jax.scipy.linalg.solve_triangular(L_p, m_p - m_q, lower=True)
    n = m_q.shape[-1]
    logdet = 2.0 * (jnp.sum(jnp.log(jnp.diag(L_p))) - jnp.sum(jnp.log(jnp.diag(L_q))))
    return 0.5 * (jnp.sum(W * W) + r @ r - n + logdet)


def _u_kl(family, params, fixed):
    Z = params["Z"]
    prior_Z = Z @ fixed["F"].T + fixed["a"]
    Lu = _free_to_chol(params["Lu_off"], params["Lu_logdiag"])

    def one(log_s2, log_ls, mu, Lu_j, mz):
        Lk = _kzz_chol(family, jnp.exp(log_s2), jnp.exp(log_ls), Z)
        return _kl_gauss_chol(mu, Lu_j, mz, Lk)

    return jnp.sum(jax.vmap(one, in_axes=(0, 0, 0, 0, 1))(
        params["log_s2"], params["log_ls"], params["mu_u"], Lu, prior_Z))


def _chain(params, fixed):
    C = fixed["C"]
    q = jnp.exp(params["log_q"])
    r = jnp.exp(params["log_r"])
    Sinv = jnp.diag(1.0 / q) + C.T @ (C / r[:, None])
    Ls_inv = jnp.linalg.cholesky(Sinv)
    eye = jnp.eye(q.shape[0])
    Linv = jax.scipy.linalg.solve_triangular(Ls_inv, eye, lower=True)
    S = Linv.T @ Linv
    S = 0.5 * (S + S.T)
    A = S / q[None, :]
    G = S @ C.T / r[None, :]
    return A, G, S


def _sample_paths(params, fixed, y, eps0, eps):
    """States x_{0:T} for each sample; ``y`` is (n, T, d_y), eps (n, T, d_x)."""
    A, G, S = _chain(params, fixed)
    Ls = jnp.linalg.cholesky(S)
    L0 = _free_to_chol(params["L0_off"], params["L0_logdiag"])
    x0 = params["m0"] + eps0 @ L0.T
    b = (y - fixed["d"]) @ G.T  # (n, T, d_x)
    noise = eps @ Ls.T

    def step(x, inp):
        b_t, n_t = inp
        x_new = x @ A.T + b_t + n_t
        return x_new, x_new

    _, xs = jax.lax.scan(step, x0, (jnp.swapaxes(b, 0, 1), jnp.swapaxes(noise, 0, 1)))
    xs = jnp.swapaxes(xs, 0, 1)  # (n, T, d_x)
    return jnp.concatenate([x0[:, None, :], xs], axis=1), A, b, S


def _elbo_terms(family, params, fixed, y, c, mask, eps0, eps):
    """Per-sample (loglik, transition KL) and the two shared KLs.

    ``y`` may be (T, d_y) shared by all samples or (n, T, d_y) per sample.
    Steps with ``mask == 0`` contribute nothing.
    """
    n = eps0.shape[0]
    if y.ndim == 2:
        y = jnp.broadcast_to(y, (n,) + y.shape)
    x, A, b, S = _sample_paths(params, fixed, y, eps0, eps)
    C = fixed["C"]
    r = jnp.exp(params["log_r"])
    q = jnp.exp(params["log_q"])

    resid = y - (x[:, 1:] @ C.T + fixed["d"])
    ll = -0.5 * jnp.sum(LOG_2PI + jnp.log(r) + resid * resid / r, axis=-1)
    loglik = jnp.sum(ll * mask, axis=1)

    prev = x[:, :-1]
    T = prev.shape[1]
    inputs = jnp.concatenate([prev, jnp.broadcast_to(c, (n,) + c.shape)], axis=-1)
    fm, fv = _sparse_predict(family, params, fixed, inputs.reshape(n * T, -1))
    fm = fm.reshape(n, T, -1)
    fv = fv.reshape(n, T, -1)
    mu = prev @ A.T + b
    dx = q.shape[0]
    Ls = jnp.linalg.cholesky(S)
    logdet_S = 2.0 * jnp.sum(jnp.log(jnp.diag(Ls)))
    # E_f KL[N(mu, S) || N(f, Q)] with f ~ N(fm, diag fv)
    kl_t = 0.5 * (
        jnp.sum((jnp.diag(S) + fv + (fm - mu) ** 2) / q, axis=-1)
        - dx + jnp.sum(jnp.log(q)) - logdet_S
    )
    trans = jnp.sum(kl_t * mask, axis=1)

    L0 = _free_to_chol(params["L0_off"], params["L0_logdiag"])
    x0_kl = _kl_gauss_chol(params["m0"], L0, fixed["p0_mean"], fixed["p0_chol"])
    u_kl = _u_kl(family, params, fixed)
    return loglik, trans, x0_kl, u_kl


def _elbo_value(family, params, fixed, y, c, mask, eps0, eps):
    loglik, trans, x0_kl, u_kl = _elbo_terms(family, params, fixed, y, c, mask, eps0, eps)
    t1 = jnp.mean(loglik)
    t2 = jnp.mean(trans)
    return t1 - t2 - x0_kl - u_kl, jnp.stack([t1, t2, x0_kl, u_kl])


_terms_jit = jax.jit(_elbo_terms, static_argnums=0)
_value_and_grad_jit = jax.jit(jax.value_and_grad(_elbo_value, argnums=1, has_aux=True),
                              static_argnums=0)


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def draw_noise(seed, S: int, T: int, d_x: int):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((S, d_x)), rng.standard_normal((S, T, d_x))


def padded_data(traj: Trajectory, eps=None):
    """Zero-pad y, c (and optionally the step noise) to the bucket length."""
    T = traj.T
    P = padded_length(T)
    y = np.zeros((P, traj.y.shape[1]))
    c = np.zeros((P, traj.c.shape[1]))
    y[:T] = traj.y
    c[:T] = traj.c
    mask = np.zeros(P)
    mask[:T] = 1.0
    if eps is None:
        return y, c, mask
    e = np.zeros(eps.shape[:-2] + (P, eps.shape[-1]))
    e[..., :T, :] = eps
    return y, c, mask, e


@dataclass(frozen=True)
class ElboEstimate:
    value: float
    expected_loglik: float
    transition_kl: float
    x0_kl: float
    u_kl: float
    S: int
    seed: object
    per_sample: np.ndarray = field(repr=False)

    @property
    def std_error(self) -> float:
        if self.S < 2:
            return float("nan")
        return float(np.std(self.per_sample, ddof=1) / np.sqrt(self.S))


def _check(model: GpssmModel, traj: Trajectory):
    if traj.T < 1:
        raise ValueError("ELBO needs at least one observation")
    if traj.y.shape[1] != model.d_y or traj.c.shape[1] != model.d_c:
        raise ValueError("trajectory dims do not match the model")


def elbo(model: GpssmModel, chain: VariationalChain | None, traj: Trajectory, S: int = 10,
         seed=0, chunk: int = 2048) -> ElboEstimate:
    """Reparameterised MC estimate of the ELBO with ``S`` state paths.

    ``chain`` is accepted for symmetry with the sampling API; the chain is
    always rebuilt from the model's current noise and emission parameters.
    """
    _check(model, traj)
    if S < 1:
        raise ValueError("S must be at least 1")
    params, fixed = pack(model)
    eps0, eps = draw_noise(seed, S, traj.T, model.d_x)
    y, c, mask, eps = padded_data(traj, eps)
    ll, tr = [], []
    x0_kl = u_kl = 0.0
    for lo in range(0, S, chunk):
        l, t, x0_kl, u_kl = _terms_jit(model.family, params, fixed, y, c, mask,
                                       eps0[lo:lo + chunk], eps[lo:lo + chunk])
        ll.append(np.asarray(l))
        tr.append(np.asarray(t))
    ll = np.concatenate(ll)
    tr = np.concatenate(tr)
    x0_kl = float(x0_kl)
    u_kl = float(u_kl)
    term1 = float(np.mean(ll))
    term2 = float(np.mean(tr))
    return ElboEstimate(
        value=term1 - term2 - x0_kl - u_kl,
        expected_loglik=term1,
        transition_kl=term2,
        x0_kl=x0_kl,
        u_kl=u_kl,
        S=S,
        seed=seed,
        per_sample=ll - tr - x0_kl - u_kl,
    )


def elbo_gradient(model: GpssmModel, traj: Trajectory, S: int = 10, seed=0):
    """Value and gradient of the same-seed ELBO w.r.t. the unconstrained parameters."""
    _check(model, traj)
    params, fixed = pack(model)
    eps0, eps = draw_noise(seed, S, traj.T, model.d_x)
    y, c, mask, eps = padded_data(traj, eps)
    (val, _), grad = _value_and_grad_jit(model.family, params, fixed, y, c, mask, eps0, eps)
    return float(val), {k: np.asarray(v) for k, v in grad.items()}


def elbo_from_params(model: GpssmModel, params, traj: Trajectory, S: int = 10, seed=0) -> float:
    """Same-seed ELBO at an arbitrary unconstrained parameter dict."""
    _, fixed = pack(model)
    eps0, eps = draw_noise(seed, S, traj.T, model.d_x)
    y, c, mask, eps = padded_data(traj, eps)
    l, t, x0_kl, u_kl = _terms_jit(model.family, params, fixed, y, c, mask, eps0, eps)
    return float(np.mean(np.asarray(l) - np.asarray(t)) - float(x0_kl) - float(u_kl))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.01
    samples: int = 10
    seed: int = 0
    trainable: tuple = PARAM_GROUPS

    def __post_init__(self):
        if self.epochs < 1 or self.samples < 1:
            raise ValueError("epochs and samples must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        bad = set(self.trainable) - set(PARAM_GROUPS)
        if bad:
            raise ValueError(f"unknown parameter groups {sorted(bad)}")
        object.__setattr__(self, "trainable", tuple(g for g in PARAM_GROUPS if g in self.trainable))


TRACE_HEADER = ("epoch", "elbo", "expected_loglik", "transition_kl", "x0_kl", "u_kl")


@dataclass(frozen=True)
class TrainTrace:
    """One row per completed epoch: the objective evaluated before that update."""

    rows: np.ndarray
    aborted: bool = False

    @property
    def elbo(self) -> np.ndarray:
        return self.rows[:, 1]

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(",".join(TRACE_HEADER) + "\n")
            for row in self.rows:
                fh.write(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]) + "\n")


def train(model: GpssmModel, traj: Trajectory, cfg: TrainConfig = TrainConfig()):
    """Adam ascent on the MC-ELBO with fresh common random numbers per epoch.

    Returns ``(model, TrainTrace)``. If a gradient turns non-finite the loop
    stops and the last model with finite parameters is returned with
    ``trace.aborted`` set.
    """
    _check(model, traj)
    if not cfg.trainable:
        return model, TrainTrace(np.zeros((0, len(TRACE_HEADER))))
    params, fixed = pack(model)
    params = {k: jnp.asarray(v) for k, v in params.items()}
    keys = [k for g in cfg.trainable for k in _GROUP_KEYS[g]]
    opt = optax.adam(cfg.learning_rate)
    state = opt.init({k: params[k] for k in keys})
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.epochs)
    rows = []
    aborted = False
    for epoch in range(cfg.epochs):
        eps0, eps = draw_noise(seeds[epoch], cfg.samples, traj.T, model.d_x)
        y, c, mask, eps = padded_data(traj, eps)
        (val, terms), grad = _value_and_grad_jit(model.family, params, fixed, y, c, mask, eps0, eps)
        g = {k: -grad[k] for k in keys}
        if not (np.isfinite(float(val)) and all(bool(jnp.all(jnp.isfinite(v))) for v in g.values())):
            aborted = True
            break
        updates, state = opt.update(g, state)
        new = optax.apply_updates({k: params[k] for k in keys}, updates)
        if not all(bool(jnp.all(jnp.isfinite(v))) for v in new.values()):
            aborted = True
            break
        rows.append([epoch, float(val), *np.asarray(terms).tolist()])
        params = {**params, **new}
    trained = unpack(model, params, cfg.trainable) if rows else model
    return trained, TrainTrace(np.array(rows, dtype=np.float64).reshape(-1, len(TRACE_HEADER)), aborted)
