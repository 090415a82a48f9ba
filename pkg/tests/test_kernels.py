import numpy as np
import pytest

from conftest import dense_exp_cov, random_times
from fluxgibbs.errors import NotPositiveDefiniteError


def _dense(diag, sub):
    return np.diag(diag) + np.diag(sub, 1) + np.diag(sub, -1)


def test_correlation_precision_inverts_kernel(backend, rng):
    for n in (1, 2, 7, 60):
        t = random_times(rng, n)
        diag, sub, logdet = backend.correlation_precision(t, 0.8)
        R = dense_exp_cov(t, 0.8, np.ones(n))
        C = _dense(diag, sub)
        assert np.abs(C @ R - np.eye(n)).max() < 1e-10
        assert logdet == pytest.approx(np.linalg.slogdet(C)[1], abs=1e-10)


def test_unit_spacing_entries(backend):
    # times one minute apart with ell = 1 minute -> delta = 1
    diag, sub, _ = backend.correlation_precision(np.array([0.0, 60.0, 120.0]), 1.0)
    np.testing.assert_allclose(diag, [1.1565176427, 1.3130352855, 1.1565176427], rtol=1e-10)
    np.testing.assert_allclose(sub, [-0.4254590641, -0.4254590641], rtol=1e-10)


def test_far_apart_times_decouple(backend):
    diag, sub, logdet = backend.correlation_precision(np.array([0.0, 1e6, 2e6]), 1.0)
    np.testing.assert_array_equal(diag, np.ones(3))
    np.testing.assert_array_equal(sub, np.zeros(2))
    assert logdet == 0.0


def test_rejects_duplicate_times(backend):
    with pytest.raises(ValueError, match="index 2"):
        backend.correlation_precision(np.array([0.0, 1.0, 1.0]), 1.0)


def test_cholesky_solve_roundtrip(backend, rng):
    n = 40
    diag = rng.uniform(2.0, 3.0, n)
    sub = rng.uniform(-0.9, 0.9, n - 1)
    A = _dense(diag, sub)
    ldiag, lsub = backend.tridiag_cholesky(diag, sub)
    L = np.diag(ldiag) + np.diag(lsub, -1)
    np.testing.assert_allclose(L @ L.T, A, atol=1e-12)
    b = rng.normal(size=(n, 3))
    np.testing.assert_allclose(backend.tridiag_solve(ldiag, lsub, b), np.linalg.solve(A, b), atol=1e-12)
    np.testing.assert_allclose(backend.tridiag_solve(ldiag, lsub, b[:, 0]), np.linalg.solve(A, b[:, 0]), atol=1e-12)
    np.testing.assert_allclose(backend.tridiag_back_solve(ldiag, lsub, b), np.linalg.solve(L.T, b), atol=1e-12)
    np.testing.assert_allclose(backend.tridiag_matvec(diag, sub, b), A @ b, atol=1e-12)


def test_cholesky_rejects_indefinite(backend):
    with pytest.raises(NotPositiveDefiniteError):
        backend.tridiag_cholesky(np.array([1.0, 1.0]), np.array([2.0]))


@pytest.mark.parametrize("n", [1, 2, 30])
def test_markov_solve_matches_dense(backend, rng, n):
    t = random_times(rng, n)
    sd = rng.uniform(0.3, 2.0, n)
    dvar = rng.uniform(0.05, 1.5, n)
    Sigma = dense_exp_cov(t, 1.3, sd) + np.diag(dvar)
    rhs = rng.normal(size=(n, 4))
    x, logdet = backend.markov_solve(t, 1.3, sd, dvar, rhs)
    np.testing.assert_allclose(x, np.linalg.solve(Sigma, rhs), rtol=1e-9, atol=1e-12)
    assert logdet == pytest.approx(np.linalg.slogdet(Sigma)[1], rel=1e-10, abs=1e-10)
    quad, logdet2 = backend.markov_quad_logdet(t, 1.3, sd, dvar, rhs[:, 0])
    assert quad == pytest.approx(rhs[:, 0] @ np.linalg.solve(Sigma, rhs[:, 0]), rel=1e-10)
    assert logdet2 == pytest.approx(logdet, rel=1e-12, abs=1e-12)


def test_backends_agree(rng):
    from fluxgibbs import _kernels_py
    compiled = pytest.importorskip("fluxgibbs._kernels")
    t = random_times(rng, 500)
    sd = rng.uniform(0.3, 2.0, 500)
    dvar = rng.uniform(0.05, 1.5, 500)
    r = rng.normal(size=500)
    a = compiled.markov_quad_logdet(t, 0.5, sd, dvar, r)
    b = _kernels_py.markov_quad_logdet(t, 0.5, sd, dvar, r)
    np.testing.assert_allclose(a, b, rtol=1e-11)


def test_entries_across_spacing_regimes(backend):
    # Gaps from 1e-6 to ~36 length scales, straddling every evaluation branch.
    delta = np.array([1e-6, 1e-3, 0.2, 0.4999, 0.5, 0.5001, 2.0, 15.0, 36.0])
    t = np.concatenate([[0.0], np.cumsum(delta * 60.0)])
    diag, sub, logdet = backend.correlation_precision(t, 1.0)
    denom = -np.expm1(-2.0 * delta)
    np.testing.assert_allclose(sub, -np.exp(-delta) / denom, rtol=1e-13)
    a = np.exp(-2.0 * delta) / denom
    expect = np.ones(delta.size + 1)
    expect[:-1] += a
    expect[1:] += a
    np.testing.assert_allclose(diag, expect, rtol=1e-13)
    assert logdet == pytest.approx(-np.sum(np.log(denom)), rel=1e-13)


def test_log_accumulation_long_series(backend, rng):
    # Many small gaps drive the running product far below 1e-150.
    n = 5000
    t = np.cumsum(rng.uniform(0.01, 0.05, n))
    sd = rng.uniform(0.3, 2.0, n)
    dvar = rng.uniform(0.05, 1.5, n)
    logdet_c = backend.correlation_precision(t, 2.0)[2]
    delta = np.diff(t) / 120.0
    assert logdet_c == pytest.approx(-np.sum(np.log(-np.expm1(-2.0 * delta))), rel=1e-12)
    q1, l1 = backend.markov_quad_logdet(t, 2.0, sd, dvar, np.ones(n))
    x, l2 = backend.markov_solve(t, 2.0, sd, dvar, np.ones(n))
    assert l1 == pytest.approx(l2, rel=1e-12)
    assert q1 == pytest.approx(x.sum(), rel=1e-10)
