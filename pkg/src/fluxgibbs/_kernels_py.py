"""Pure numpy/scipy implementations of the tridiagonal kernels.

Same signatures and semantics as the compiled ``_kernels`` module. Used when
the extension is not built or when ``FLUXGIBBS_PURE_PYTHON=1``.
"""
import numpy as np
from scipy.linalg import cho_solve_banded, cholesky_banded, solve_banded

from .errors import NotPositiveDefiniteError

UNDERFLOW_DELTA = 37.0


def correlation_precision(times, ell_minutes):
    times = np.asarray(times, dtype=np.float64)
    n = times.shape[0]
    delta = np.diff(times) / (60.0 * ell_minutes)
    if np.any(delta <= 0.0):
        k = int(np.argmax(delta <= 0.0))
        raise ValueError(f"non-increasing times at index {k + 1}")
    far = delta > UNDERFLOW_DELTA
    d = np.where(far, 1.0, delta)
    e1 = np.where(far, 0.0, np.exp(-d))
    denom = np.where(far, 1.0, -np.expm1(-2.0 * d))
    a = e1 * e1 / denom
    diag = np.ones(n)
    diag[:-1] += a
    diag[1:] += a
    sub = -e1 / denom
    return diag, sub, float(-np.sum(np.log(denom)))


def _banded(diag, sub):
    ab = np.zeros((2, diag.shape[0]))
    ab[0] = diag
    ab[1, :-1] = sub
    return ab


def tridiag_cholesky(diag, sub):
    diag = np.asarray(diag, dtype=np.float64)
    sub = np.asarray(sub, dtype=np.float64)
    if diag.shape[0] == 0:
        return np.empty(0), np.empty(0)
    try:
        cb = cholesky_banded(_banded(diag, sub), lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc
    return cb[0].copy(), cb[1, :-1].copy()


def _factor_banded(ldiag, lsub):
    return _banded(np.asarray(ldiag, dtype=np.float64), np.asarray(lsub, dtype=np.float64))


def tridiag_solve(ldiag, lsub, rhs):
    rhs = np.array(rhs, dtype=np.float64)
    if rhs.shape[0] == 0:
        return rhs
    return cho_solve_banded((_factor_banded(ldiag, lsub), True), rhs, check_finite=False)


def tridiag_back_solve(ldiag, lsub, rhs):
    rhs = np.array(rhs, dtype=np.float64)
    n = rhs.shape[0]
    if n == 0:
        return rhs
    # upper bidiagonal L' in (1, 1) banded storage
    ab = np.zeros((2, n))
    ab[0, 1:] = lsub
    ab[1] = ldiag
    return solve_banded((0, 1), ab, rhs, check_finite=False)


def tridiag_matvec(diag, sub, x):
    x = np.asarray(x, dtype=np.float64)
    diag = np.asarray(diag, dtype=np.float64)
    sub = np.asarray(sub, dtype=np.float64)
    if x.ndim == 2:
        diag = diag[:, None]
        sub = sub[:, None]
    out = diag * x
    out[:-1] += sub * x[1:]
    out[1:] += sub * x[:-1]
    return out


def markov_solve(times, ell_minutes, sigma, dvar, rhs):
    sigma = np.asarray(sigma, dtype=np.float64)
    dvar = np.asarray(dvar, dtype=np.float64)
    rhs = np.asarray(rhs, dtype=np.float64)
    cdiag, csub, logdet_c = correlation_precision(times, ell_minutes)
    w = np.sqrt(dvar) / sigma
    ldiag, lsub = tridiag_cholesky(w * w * cdiag + 1.0, w[:-1] * w[1:] * csub)
    logdet = 2.0 * np.sum(np.log(ldiag)) + 2.0 * np.sum(np.log(sigma)) - logdet_c
    col = (lambda v: v[:, None]) if rhs.ndim == 2 else (lambda v: v)
    v = col(w) * tridiag_matvec(cdiag, csub, rhs / col(sigma))
    x = tridiag_solve(ldiag, lsub, v) / col(np.sqrt(dvar))
    return x, float(logdet)


def markov_quad_logdet(times, ell_minutes, sigma, dvar, resid):
    resid = np.asarray(resid, dtype=np.float64)
    if resid.shape[0] == 0:
        return 0.0, 0.0
    x, logdet = markov_solve(times, ell_minutes, sigma, dvar, resid)
    return float(resid @ x), logdet
