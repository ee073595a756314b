"""GPSSM generative model, sparse variational state and one-step prediction.

Model::

    f ~ GP(m, k)                          one independent GP per latent dim
    x_0 ~ N(mu_0, Sigma_0)
    x_t | f_t ~ N(f_t, Q),                f_t = f(x_{t-1}, c_{t-1})
    y_t | x_t ~ N(C x_t + d, R)

The prior mean is affine, ``m(x~) = F x~ + a``, with ``F = [I 0]`` and
``a = 0`` by default (identity on the state part, controls ignored).
The GP is summarised by inducing outputs ``u ~ q(u) = N(mu_u, Sigma_u)``
at shared locations ``Z`` and ``u`` is always marginalised analytically.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .kernels import KernelFamily, KernelSpec, gram, kernel_matrix
from .numerics import DimensionMismatch, GaussianDist, as_matrix, as_vector, cholesky

GP_JITTER = 1e-8  # relative to the signal variance, added to every K_zz


@dataclass(frozen=True)
class InducingSet:
    """Inducing locations ``Z`` (M, d_in) shared by all latent dims and q(u) per dim."""

    Z: np.ndarray
    mean: np.ndarray  # (d_x, M)
    chol: np.ndarray  # (d_x, M, M) lower-triangular factors of Sigma_u

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=np.float64))
        mean = np.atleast_2d(np.asarray(self.mean, dtype=np.float64))
        chol = np.asarray(self.chol, dtype=np.float64)
        if chol.ndim == 2:
            chol = chol[None]
        M = Z.shape[0]
        if M < 1 or mean.shape[1] != M or chol.shape[1:] != (M, M) or chol.shape[0] != mean.shape[0]:
            raise DimensionMismatch(
                f"inconsistent inducing shapes Z{Z.shape} mean{mean.shape} chol{chol.shape}"
            )
        if not np.all(np.isfinite(Z)):
            raise ValueError("inducing locations must be finite")
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", np.tril(chol))

    @property
    def num(self) -> int:
        return self.Z.shape[0]

    @property
    def cov(self) -> np.ndarray:
        return self.chol @ np.swapaxes(self.chol, -1, -2)


@dataclass(frozen=True)
class GpssmModel:
    kernels: tuple
    inducing: InducingSet
    C: np.ndarray
    d: np.ndarray
    q_diag: np.ndarray
    r_diag: np.ndarray
    x0_prior: GaussianDist
    qx0: GaussianDist
    d_c: int
    mean_weights: np.ndarray = field(default=None)
    mean_offset: np.ndarray = field(default=None)

    def __post_init__(self):
        kernels = tuple(self.kernels)
        C = np.atleast_2d(np.asarray(self.C, dtype=np.float64))
        d_y, d_x = C.shape
        d_in = d_x + int(self.d_c)
        if len(kernels) != d_x:
            raise DimensionMismatch(f"need one kernel per latent dim ({d_x}), got {len(kernels)}")
        if any(k.input_dim != d_in for k in kernels):
            raise DimensionMismatch("kernel lengthscales must cover state and control dims")
        if len({k.family for k in kernels}) != 1:
            raise ValueError("all latent dims must use the same kernel family")
        q = as_vector(self.q_diag)
        r = as_vector(self.r_diag)
        if q.size != d_x or r.size != d_y or np.any(q <= 0) or np.any(r <= 0):
            raise ValueError("Q and R must be positive diagonals of matching size")
        F = np.hstack([np.eye(d_x), np.zeros((d_x, int(self.d_c)))]) if self.mean_weights is None \
            else np.atleast_2d(np.asarray(self.mean_weights, dtype=np.float64))
        a = np.zeros(d_x) if self.mean_offset is None else as_vector(self.mean_offset)
        if F.shape != (d_x, d_in) or a.size != d_x:
            raise DimensionMismatch("prior mean weights must be (d_x, d_x + d_c)")
        if self.inducing.Z.shape[1] != d_in or self.inducing.mean.shape[0] != d_x:
            raise DimensionMismatch("inducing set does not match model dimensions")
        if self.x0_prior.dim != d_x or self.qx0.dim != d_x:
            raise DimensionMismatch("initial-state distributions must have dim d_x")
        for name, value in (("kernels", kernels), ("C", C), ("d", as_vector(self.d)),
                            ("q_diag", q), ("r_diag", r), ("d_c", int(self.d_c)),
                            ("mean_weights", F), ("mean_offset", a)):
            object.__setattr__(self, name, value)
        if self.d.size != d_y:
            raise DimensionMismatch("offset d must have length d_y")

    # -- dimensions ---------------------------------------------------------
    @property
    def d_x(self) -> int:
        return self.C.shape[1]

    @property
    def d_y(self) -> int:
        return self.C.shape[0]

    @property
    def d_in(self) -> int:
        return self.d_x + self.d_c

    @property
    def family(self) -> KernelFamily:
        return self.kernels[0].family

    @property
    def Q(self) -> np.ndarray:
        return np.diag(self.q_diag)

    @property
    def R(self) -> np.ndarray:
        return np.diag(self.r_diag)

    def prior_mean(self, X) -> np.ndarray:
        """``m(x~)`` for rows of ``X`` (n, d_in) -> (n, d_x)."""
        return np.atleast_2d(X) @ self.mean_weights.T + self.mean_offset

    def kzz(self, dim: int) -> np.ndarray:
        k = self.kernels[dim]
        K = gram(k, self.inducing.Z)
        return K + GP_JITTER * k.signal_variance * np.eye(self.inducing.num)

    def with_params(self, **changes) -> "GpssmModel":
        return replace(self, **changes)

    @cached_property
    def posterior(self) -> "SparsePosterior":
        return SparsePosterior.from_model(self)


@dataclass(frozen=True)
class SparsePosterior:
    """Per-dim cached quantities of the sparse predictive ``q(f) = int p(f|u) q(u) du``.

    ``beta = K^-1 (mu_u - m(Z))`` and ``B = K^-1 - K^-1 Sigma_u K^-1``, so that
    mean ``m(x) + k^T beta`` and variance ``k(x,x) - k^T B k``.
    """

    Kzz_chol: np.ndarray  # (d_x, M, M)
    beta: np.ndarray  # (d_x, M)
    B: np.ndarray  # (d_x, M, M)

    @classmethod
    def from_model(cls, model: GpssmModel) -> "SparsePosterior":
        Z = model.inducing.Z
        resid = model.inducing.mean - model.prior_mean(Z).T
        chols, betas, Bs = [], [], []
        for j in range(model.d_x):
            L = cholesky(model.kzz(j))
            Kinv = sla.cho_solve((L, True), np.eye(model.inducing.num))
            W = Kinv @ model.inducing.chol[j]
            chols.append(L)
            betas.append(Kinv @ resid[j])
            B = Kinv - W @ W.T
            Bs.append(0.5 * (B + B.T))
        return cls(np.stack(chols), np.stack(betas), np.stack(Bs))


NEGATIVE_VARIANCE_CLIPS = {"count": 0}


def sparse_gp_predict_batch(model: GpssmModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Predictive mean and variance of ``f`` at augmented inputs ``X`` (n, d_in)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != model.d_in:
        raise DimensionMismatch(f"inputs have {X.shape[1]} columns, model expects {model.d_in}")
    post = model.posterior
    mean = model.prior_mean(X)
    var = np.empty_like(mean)
    Z = model.inducing.Z
    for j, k in enumerate(model.kernels):
        Kxz = kernel_matrix(k.family, k.signal_variance, k.lengthscales, X, Z)
        mean[:, j] += Kxz @ post.beta[j]
        var[:, j] = k.signal_variance - np.einsum("nm,mk,nk->n", Kxz, post.B[j], Kxz)
    neg = var < 0.0
    if np.any(neg):
        if np.min(var) < -1e-10 * max(k.signal_variance for k in model.kernels):
            NEGATIVE_VARIANCE_CLIPS["count"] += int(np.sum(neg))
        var = np.where(neg, 0.0, var)
    return mean, var


def _augment(x, c, model: GpssmModel) -> np.ndarray:
    x = as_vector(x)
    c = np.zeros(0) if c is None else as_vector(c)
    if x.size != model.d_x or c.size != model.d_c:
        raise DimensionMismatch(f"state/control lengths {x.size}/{c.size} do not match model")
    return np.concatenate([x, c])


def sparse_gp_predict(model: GpssmModel, x_aug) -> GaussianDist:
    """Distribution of ``f(x~)`` with the inducing outputs integrated out."""
    x_aug = as_vector(x_aug)
    mean, var = sparse_gp_predict_batch(model, x_aug[None, :])
    return GaussianDist(mean[0], np.diag(var[0]))


# ---------------------------------------------------------------------------
# Data and the variational chain
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Observations ``y_1..y_T`` with the controls ``c_0..c_{T-1}`` that produced them.

    ``c[i]`` is applied at time ``i`` and drives ``x_{i+1}``. The next control
    to be chosen is never stored here; scoring functions take it separately.
    """

    y: np.ndarray
    c: np.ndarray
    x: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        y = y.reshape(len(y), -1) if y.ndim != 2 else y
        c = c.reshape(len(c), -1) if c.ndim != 2 else c
        if len(c) != len(y):
            raise DimensionMismatch(f"{len(y)} observations need {len(y)} controls, got {len(c)}")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "c", c)
        if self.x is not None:
            x = np.atleast_2d(np.asarray(self.x, dtype=np.float64))
            if len(x) != len(y) + 1:
                raise DimensionMismatch("states must cover x_0..x_T")
            object.__setattr__(self, "x", x)

    @property
    def T(self) -> int:
        return len(self.y)

    def append(self, y_next, c_used, x_next=None) -> "Trajectory":
        y = np.vstack([self.y, np.atleast_2d(as_vector(y_next))])
        c = np.vstack([self.c, np.atleast_2d(as_vector(c_used))])
        x = None
        if self.x is not None and x_next is not None:
            x = np.vstack([self.x, np.atleast_2d(as_vector(x_next))])
        return Trajectory(y, c, x)


@dataclass(frozen=True)
class VariationalChain:
    """``q(x_i | x_{i-1}) = N(A x_{i-1} + b_{i-1}, S)`` and the free ``q(x_0)``.

    With the state-as-pseudo-input family these are fixed by the model:
    ``S = (Q^-1 + C^T R^-1 C)^-1``, ``A = S Q^-1``, ``b = S C^T R^-1 (y_i - d)``.
    """

    A: np.ndarray
    b: np.ndarray  # (T, d_x); row i-1 drives x_i
    S: np.ndarray
    qx0: GaussianDist

    @classmethod
    def from_model(cls, model: GpssmModel, traj: Trajectory) -> "VariationalChain":
        A, G, S = chain_matrices(model.C, model.q_diag, model.r_diag)
        b = (traj.y - model.d) @ G.T
        return cls(A, b, S, model.qx0)

    @property
    def T(self) -> int:
        return len(self.b)


def chain_matrices(C, q_diag, r_diag):
    """``(A, G, S)`` with ``b = G (y - d)``."""
    C = np.atleast_2d(C)
    Sinv = np.diag(1.0 / q_diag) + C.T @ (C / r_diag[:, None])
    S = np.linalg.inv(Sinv)
    S = 0.5 * (S + S.T)
    A = S / q_diag[None, :]
    G = S @ C.T / r_diag[None, :]
    return A, G, S


def sample_posterior_states(model: GpssmModel, chain: VariationalChain, traj: Trajectory,
                            seed, n_samples: int | None = None) -> np.ndarray:
    """Draw ``x_{0:T}`` from the variational chain.

    Returns (T+1, d_x), or (n_samples, T+1, d_x) when ``n_samples`` is given.
    The output is a deterministic function of ``seed``.
    """
    if chain.T != traj.T:
        raise DimensionMismatch(f"chain covers {chain.T} steps, trajectory has {traj.T}")
    rng = np.random.default_rng(seed)
    n = 1 if n_samples is None else int(n_samples)
    d_x = model.d_x
    eps0 = rng.standard_normal((n, d_x))
    eps = rng.standard_normal((n, traj.T, d_x))
    L0 = chain.qx0.chol()
    Ls = cholesky(chain.S)
    x = np.empty((n, traj.T + 1, d_x))
    x[:, 0] = chain.qx0.mean + eps0 @ L0.T
    for i in range(1, traj.T + 1):
        x[:, i] = x[:, i - 1] @ chain.A.T + chain.b[i - 1] + eps[:, i - 1] @ Ls.T
    return x[0] if n_samples is None else x


def emission_noise(model: GpssmModel) -> np.ndarray:
    """``R + C Q C^T``: observation covariance given the transition output."""
    return model.R + model.C @ model.Q @ model.C.T


def predict_observation(model: GpssmModel, x_T, c_star, seed) -> tuple[GaussianDist, np.ndarray]:
    """Sample ``f(x_T, c*)`` and return ``N(C f + d, R + C Q C^T)`` with the sample."""
    g = sparse_gp_predict(model, _augment(x_T, c_star, model))
    rng = np.random.default_rng(seed)
    f = g.mean + np.sqrt(np.diag(g.cov)) * rng.standard_normal(model.d_x)
    return GaussianDist(model.C @ f + model.d, emission_noise(model)), f


def predict_mean_observation(model: GpssmModel, X_aug) -> np.ndarray:
    """``C E[f(x~)] + d`` for each row of ``X_aug``."""
    mean, _ = sparse_gp_predict_batch(model, X_aug)
    return mean @ model.C.T + model.d


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------


def init_model(
    d_x: int,
    d_c: int,
    family,
    signal_variance: float,
    lengthscale,
    C,
    d=None,
    q_diag=0.01,
    r_diag=0.01,
    x0_mean=None,
    x0_cov=None,
    Z=None,
    num_inducing: int = 20,
    bounds=None,
    seed=0,
) -> GpssmModel:
    """Model with ``q(u) = p(u)`` and ``q(x_0) = p(x_0)``.

    When ``Z`` is not given, ``num_inducing`` locations are drawn uniformly
    inside ``bounds = (lower, upper)`` over the augmented input space.
    """
    d_in = d_x + d_c
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    d = np.zeros(C.shape[0]) if d is None else as_vector(d)
    ls = np.broadcast_to(np.asarray(lengthscale, dtype=np.float64), (d_in,)).copy()
    kernels = tuple(KernelSpec(family, signal_variance, ls) for _ in range(d_x))
    if Z is None:
        if bounds is None:
            raise ValueError("need either Z or bounds to place inducing points")
        lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (d_in,)) for b in bounds)
        Z = np.random.default_rng(seed).uniform(lo, hi, size=(num_inducing, d_in))
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    x0_mean = np.zeros(d_x) if x0_mean is None else as_vector(x0_mean)
    x0_cov = np.eye(d_x) if x0_cov is None else as_matrix(x0_cov)
    prior = GaussianDist(x0_mean, x0_cov)
    q = np.broadcast_to(np.asarray(q_diag, dtype=np.float64), (d_x,)).copy()
    r = np.broadcast_to(np.asarray(r_diag, dtype=np.float64), (C.shape[0],)).copy()
    skeleton = GpssmModel(
        kernels=kernels,
        inducing=InducingSet(Z, np.zeros((d_x, len(Z))), np.tile(np.eye(len(Z)), (d_x, 1, 1))),
        C=C, d=d, q_diag=q, r_diag=r, x0_prior=prior, qx0=prior, d_c=d_c,
    )
    return reset_inducing_to_prior(skeleton)


def reset_inducing_to_prior(model: GpssmModel) -> GpssmModel:
    """Set ``q(u) = p(u) = N(m(Z), K_zz)`` for every latent dim."""
    Z = model.inducing.Z
    mean = model.prior_mean(Z).T.copy()
    chol = np.stack([cholesky(model.kzz(j)) for j in range(model.d_x)])
    return model.with_params(inducing=InducingSet(Z, mean, chol))


# ---------------------------------------------------------------------------
# Key-value checkpoint format
# ---------------------------------------------------------------------------

FORMAT_TAG = "gpssm-model 1"


def _fmt_array(a: np.ndarray) -> str:
    a = np.asarray(a, dtype=np.float64)
    shape = "x".join(str(s) for s in a.shape) or "scalar"
    return shape + " | " + " ".join(repr(float(v)) for v in a.ravel())


def _parse_array(text: str) -> np.ndarray:
    shape_txt, _, values = text.partition("|")
    shape_txt = shape_txt.strip()
    shape = () if shape_txt == "scalar" else tuple(int(s) for s in shape_txt.split("x"))
    vals = np.array([float(v) for v in values.split()], dtype=np.float64)
    return vals.reshape(shape)


def dumps_model(model: GpssmModel) -> str:
    """Plain-text ``key = value`` dump; floats are written with ``repr`` so they round-trip."""
    entries = [
        ("format", FORMAT_TAG),
        ("d_c", str(model.d_c)),
        ("kernel_family", model.family.value),
        ("signal_variance", _fmt_array([k.signal_variance for k in model.kernels])),
        ("lengthscales", _fmt_array(np.stack([k.lengthscales for k in model.kernels]))),
        ("Z", _fmt_array(model.inducing.Z)),
        ("mu_u", _fmt_array(model.inducing.mean)),
        ("chol_u", _fmt_array(model.inducing.chol)),
        ("C", _fmt_array(model.C)),
        ("d", _fmt_array(model.d)),
        ("q_diag", _fmt_array(model.q_diag)),
        ("r_diag", _fmt_array(model.r_diag)),
        ("x0_prior_mean", _fmt_array(model.x0_prior.mean)),
        ("x0_prior_cov", _fmt_array(model.x0_prior.cov)),
        ("qx0_mean", _fmt_array(model.qx0.mean)),
        ("qx0_cov", _fmt_array(model.qx0.cov)),
        ("mean_weights", _fmt_array(model.mean_weights)),
        ("mean_offset", _fmt_array(model.mean_offset)),
    ]
    return "".join(f"{k} = {v}\n" for k, v in entries)


def loads_model(text: str) -> GpssmModel:
    kv = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed model line: {line!r}")
        kv[key.strip()] = value.strip()
    if kv.get("format") != FORMAT_TAG:
        raise ValueError(f"unsupported model format {kv.get('format')!r}")
    arr = {k: _parse_array(v) for k, v in kv.items() if "|" in v}
    family = KernelFamily.parse(kv["kernel_family"])
    kernels = tuple(KernelSpec(family, float(s2), ls)
                    for s2, ls in zip(arr["signal_variance"], arr["lengthscales"]))
    return GpssmModel(
        kernels=kernels,
        inducing=InducingSet(arr["Z"], arr["mu_u"], arr["chol_u"]),
        C=arr["C"], d=arr["d"], q_diag=arr["q_diag"], r_diag=arr["r_diag"],
        x0_prior=GaussianDist(arr["x0_prior_mean"], arr["x0_prior_cov"]),
        qx0=GaussianDist(arr["qx0_mean"], arr["qx0_cov"]),
        d_c=int(kv["d_c"]),
        mean_weights=arr["mean_weights"], mean_offset=arr["mean_offset"],
    )


def save_model(model: GpssmModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> GpssmModel:
    with open(path) as fh:
        return loads_model(fh.read())
