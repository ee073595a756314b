"""Fast invariant checks behind ``gpssm-al check``.

Each check returns ``(ok, detail)``; none takes more than a few seconds.
"""
from __future__ import annotations

import numpy as np

from .acquisition import rmse
from .kernels import KernelFamily, KernelSpec, gram
from .mi_latest import MomentBelief, init_belief, latest_mi
from .model import init_model, sparse_gp_predict_batch
from .numerics import GaussianDist, gaussian_kl
from .systems import make_system, pendulum_deriv, rk4_step


def _rmse():
    v = rmse([[3.0, 4.0]], [[0.0, 0.0]])
    return abs(v - 5 / np.sqrt(2)) < 1e-12, f"rmse((3,4)) = {v:.12f}"


def _kernel_psd():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 3))
    worst = np.inf
    for fam in KernelFamily:
        K = gram(KernelSpec.isotropic(fam, 1.3, 0.7, 3), X)
        worst = min(worst, float(np.min(np.linalg.eigvalsh(K))))
    return worst > -1e-10, f"smallest gram eigenvalue {worst:.3e}"


def _kl_zero():
    g = GaussianDist(np.array([0.3, -1.0]), np.array([[1.0, 0.2], [0.2, 0.5]]))
    v = gaussian_kl(g, g)
    return abs(v) < 1e-12, f"KL(q||q) = {v:.3e}"


def _prior_reversion():
    m = init_model(1, 1, "se", 1.0, 1.0, C=np.eye(1), bounds=([-1, 0], [1, 1]), num_inducing=8)
    X = np.array([[5.0, 0.5], [-6.0, 0.5]])
    mean, var = sparse_gp_predict_batch(m, X)
    err = float(np.max(np.abs(mean[:, 0] - X[:, 0])) + np.max(np.abs(var - 1.0)))
    return err < 1e-6, f"far-field deviation from prior {err:.3e}"


def _latmi_zero():
    m = init_model(1, 1, "se", 1.0, 1.0, C=np.eye(1), bounds=([-1, 0], [1, 1]), num_inducing=8)
    v = latest_mi(m, MomentBelief(1, np.zeros(1), np.zeros((1, 1))))
    b = init_belief(m, np.array([0.5]))
    return v == 0.0 and latest_mi(m, b) >= -1e-10, f"latMI(V=0) = {v}"


def _rk4_order():
    s0 = np.array([0.4, 0.0])

    def run(dt):
        s = s0
        for _ in range(int(round(1.0 / dt))):
            s = rk4_step(pendulum_deriv, s, np.zeros(1), dt)
        return s

    ref = run(1e-3)
    ratio = np.linalg.norm(run(0.1) - ref) / np.linalg.norm(run(0.05) - ref)
    return ratio >= 14, f"error ratio on dt halving {ratio:.2f}"


def _cartpole_rest():
    sys_ = make_system("cartpole")
    s = sys_.step(sys_.x0, np.zeros(1))
    err = float(np.max(np.abs(s - sys_.x0)))
    return err < 1e-12, f"drift from hanging rest {err:.3e}"


CHECKS = {
    "rmse": _rmse,
    "kernel-psd": _kernel_psd,
    "kl-zero": _kl_zero,
    "prior-reversion": _prior_reversion,
    "latmi-zero": _latmi_zero,
    "rk4-order": _rk4_order,
    "cartpole-rest": _cartpole_rest,
}


def run_checks():
    out = []
    for name, fn in CHECKS.items():
        try:
            ok, detail = fn()
        except Exception as exc:  # report any crash as a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
