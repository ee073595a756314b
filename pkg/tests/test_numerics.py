import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpssm_al.numerics import (LOG_2PI, DimensionMismatch, GaussianDist, NotPositiveDefinite,
                               cholesky, gaussian_entropy, gaussian_kl, gaussian_logpdf)


def random_spd(rng, n, cond=10.0):
    A = rng.normal(size=(n, n))
    Q, _ = np.linalg.qr(A)
    eig = np.exp(rng.uniform(0, np.log(cond), size=n))
    return (Q * eig) @ Q.T


spd_seeds = st.tuples(st.integers(1, 6), st.integers(0, 2**31 - 1))


def test_cholesky_identity():
    assert np.array_equal(cholesky(np.eye(3)), np.eye(3))


def test_cholesky_hand_case():
    L = cholesky([[4.0, 2.0], [2.0, 3.0]])
    assert np.allclose(L, [[2.0, 0.0], [1.0, np.sqrt(2.0)]], atol=1e-14)


def test_cholesky_indefinite_raises():
    with pytest.raises(NotPositiveDefinite):
        cholesky([[1.0, 2.0], [2.0, 1.0]])


def test_cholesky_jitter_rescues_semidefinite():
    v = np.array([1.0, 2.0, 3.0])
    L = cholesky(np.outer(v, v))
    assert np.allclose(L @ L.T, np.outer(v, v), atol=1e-3)


def test_cholesky_rejects_non_square():
    with pytest.raises(DimensionMismatch):
        cholesky(np.ones((2, 3)))


@settings(max_examples=50, deadline=None)
@given(spd_seeds)
def test_cholesky_reconstructs(args):
    n, seed = args
    a = random_spd(np.random.default_rng(seed), n, cond=1e4)
    L = cholesky(a)
    assert np.allclose(L, np.tril(L))
    assert np.linalg.norm(L @ L.T - a) <= 1e-8 * np.linalg.norm(a)


def test_logpdf_standard_normal():
    g = GaussianDist(np.zeros(1), np.eye(1))
    assert gaussian_logpdf(0.0, g) == pytest.approx(-0.5 * LOG_2PI, abs=1e-14)
    assert gaussian_logpdf(1.0, g) == pytest.approx(-0.5 * LOG_2PI - 0.5, abs=1e-14)
    assert gaussian_logpdf(0.0, g) == pytest.approx(-0.91894, abs=1e-5)


def test_logpdf_dense_oracle():
    rng = np.random.default_rng(3)
    cov = random_spd(rng, 3)
    mean = rng.normal(size=3)
    x = rng.normal(size=3)
    r = x - mean
    want = -0.5 * (3 * np.log(2 * np.pi) + np.log(np.linalg.det(cov)) + r @ np.linalg.inv(cov) @ r)
    assert gaussian_logpdf(x, GaussianDist(mean, cov)) == pytest.approx(want, rel=1e-12)


def test_logpdf_dimension_check():
    with pytest.raises(DimensionMismatch):
        gaussian_logpdf(np.zeros(2), GaussianDist(np.zeros(3), np.eye(3)))


def test_gaussian_dist_validation():
    with pytest.raises(DimensionMismatch):
        GaussianDist(np.zeros(2), np.eye(3))
    with pytest.raises(ValueError):
        GaussianDist(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianDist(np.array([np.nan]), np.eye(1))


def test_kl_cases():
    g = GaussianDist(np.zeros(2), np.eye(2))
    assert gaussian_kl(g, g) == pytest.approx(0.0, abs=1e-14)
    q = GaussianDist(np.zeros(1), np.eye(1))
    p = GaussianDist(np.ones(1), np.eye(1))
    assert gaussian_kl(q, p) == pytest.approx(0.5, abs=1e-14)


def test_kl_monte_carlo_oracle():
    rng = np.random.default_rng(11)
    q = GaussianDist(rng.normal(size=2), random_spd(rng, 2))
    p = GaussianDist(rng.normal(size=2), random_spd(rng, 2))
    x = rng.multivariate_normal(q.mean, q.cov, size=1_000_000)

    def logpdf(x, g):
        Li = np.linalg.inv(np.linalg.cholesky(g.cov))
        z = (x - g.mean) @ Li.T
        return -0.5 * (2 * np.log(2 * np.pi) + np.log(np.linalg.det(g.cov)) + np.sum(z * z, axis=1))

    d = logpdf(x, q) - logpdf(x, p)
    se = d.std() / np.sqrt(len(d))
    assert abs(d.mean() - gaussian_kl(q, p)) < 3 * se


@settings(max_examples=50, deadline=None)
@given(spd_seeds, st.integers(0, 2**31 - 1))
def test_kl_nonnegative(args, seed2):
    n, seed = args
    rng = np.random.default_rng(seed)
    rng2 = np.random.default_rng(seed2)
    q = GaussianDist(rng.normal(size=n), random_spd(rng, n))
    p = GaussianDist(rng2.normal(size=n), random_spd(rng2, n))
    assert gaussian_kl(q, p) >= -1e-10


def test_entropy_cases():
    assert gaussian_entropy(1.0) == pytest.approx(0.5 * np.log(2 * np.pi * np.e), abs=1e-14)
    assert gaussian_entropy(1.0) == pytest.approx(1.41894, abs=1e-5)
    assert gaussian_entropy(np.e**2) == pytest.approx(gaussian_entropy(1.0) + 1.0, abs=1e-13)
    assert gaussian_entropy(np.diag([2.0, 3.0])) == pytest.approx(
        gaussian_entropy(2.0) + gaussian_entropy(3.0), abs=1e-13)


@settings(max_examples=50, deadline=None)
@given(spd_seeds, st.floats(1e-3, 1e3))
def test_entropy_scaling(args, alpha):
    n, seed = args
    cov = random_spd(np.random.default_rng(seed), n)
    diff = gaussian_entropy(alpha * cov) - gaussian_entropy(cov)
    assert diff == pytest.approx(0.5 * n * np.log(alpha), abs=1e-10)
