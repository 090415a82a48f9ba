# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled tridiagonal kernels for the exponential-kernel error model.

Mirrors ``_kernels_py`` function for function; ``fluxgibbs.kernels`` picks
one of the two at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expm1, log, sqrt

cnp.import_array()

from fluxgibbs.errors import NotPositiveDefiniteError

cdef double UNDERFLOW_DELTA = 37.0
cdef double LOG_RESCALE = 1e150


cdef inline void _coupling(double delta, double* e1, double* denom) nogil:
    # e1 = exp(-delta), denom = 1 - exp(-2 delta), one transcendental call.
    cdef double em
    if delta < 0.5:
        em = expm1(-2.0 * delta)
        denom[0] = -em
        e1[0] = sqrt(1.0 + em)
    else:
        e1[0] = exp(-delta)
        denom[0] = 1.0 - e1[0] * e1[0]


cdef struct LogSum:
    double prod
    double total


cdef inline void _log_add(LogSum* acc, double x) nogil:
    # Sum of logs via a running product, rescaled before it can overflow.
    acc.prod *= x
    if acc.prod > LOG_RESCALE or acc.prod < 1.0 / LOG_RESCALE:
        acc.total += log(acc.prod)
        acc.prod = 1.0


cdef inline double _log_value(LogSum* acc) nogil:
    return acc.total + log(acc.prod)


def correlation_precision(times_in, double ell_minutes):
    """Unit-variance tridiagonal precision of the exponential kernel.

    Returns ``(diag, sub, logdet)`` where ``logdet`` is the log-determinant
    of the precision itself.
    """
    cdef const double[::1] times = _vec(times_in)
    cdef Py_ssize_t n = times.shape[0], k
    cdef double scale = 60.0 * ell_minutes
    cdef double delta, e1, denom, a
    diag_arr = np.ones(n)
    sub_arr = np.zeros(max(n - 1, 0))
    cdef double[::1] diag = diag_arr
    cdef double[::1] sub = sub_arr
    cdef LogSum acc = LogSum(1.0, 0.0)
    for k in range(n - 1):
        delta = (times[k + 1] - times[k]) / scale
        if delta <= 0.0:
            raise ValueError(f"non-increasing times at index {k + 1}")
        if delta > UNDERFLOW_DELTA:
            continue
        _coupling(delta, &e1, &denom)
        a = e1 * e1 / denom
        diag[k] += a
        diag[k + 1] += a
        sub[k] = -e1 / denom
        _log_add(&acc, denom)
    return diag_arr, sub_arr, -_log_value(&acc)


cdef int _cholesky(double[::1] diag, double[::1] sub,
                   double[::1] ldiag, double[::1] lsub) nogil:
    cdef Py_ssize_t n = diag.shape[0], k
    cdef double piv
    if n == 0:
        return 0
    piv = diag[0]
    if not piv > 0.0:
        return 1
    ldiag[0] = sqrt(piv)
    for k in range(n - 1):
        lsub[k] = sub[k] / ldiag[k]
        piv = diag[k + 1] - lsub[k] * lsub[k]
        if not piv > 0.0:
            return k + 2
        ldiag[k + 1] = sqrt(piv)
    return 0


def tridiag_cholesky(diag, sub):
    """Lower bidiagonal Cholesky factor ``(ldiag, lsub)`` of a SPD tridiagonal."""
    cdef Py_ssize_t n = len(diag)
    ldiag_arr = np.empty(n)
    lsub_arr = np.empty(max(n - 1, 0))
    cdef int info = _cholesky(np.array(diag, dtype=np.float64),
                              np.array(sub, dtype=np.float64),
                              ldiag_arr, lsub_arr)
    if info:
        raise NotPositiveDefiniteError(f"leading minor {info} is not positive")
    return ldiag_arr, lsub_arr


cdef void _solve_cols(const double[::1] ldiag, const double[::1] lsub,
                      double[:, ::1] x, bint forward, bint backward) nogil:
    cdef Py_ssize_t n = ldiag.shape[0], ncol = x.shape[1], k, j
    cdef double inv
    if forward:
        inv = 1.0 / ldiag[0]
        for j in range(ncol):
            x[0, j] *= inv
        for k in range(1, n):
            inv = 1.0 / ldiag[k]
            for j in range(ncol):
                x[k, j] = (x[k, j] - lsub[k - 1] * x[k - 1, j]) * inv
    if backward:
        inv = 1.0 / ldiag[n - 1]
        for j in range(ncol):
            x[n - 1, j] *= inv
        for k in range(n - 2, -1, -1):
            inv = 1.0 / ldiag[k]
            for j in range(ncol):
                x[k, j] = (x[k, j] - lsub[k] * x[k + 1, j]) * inv


def _vec(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _as_2d(rhs):
    arr = np.array(rhs, dtype=np.float64, order="C", copy=True)
    if arr.ndim == 1:
        return arr[:, None], True
    return arr, False


def tridiag_solve(ldiag_in, lsub_in, rhs):
    """Solve ``L L' x = rhs`` given the bidiagonal factor."""
    cdef const double[::1] ldiag = _vec(ldiag_in)
    cdef const double[::1] lsub = _vec(lsub_in)
    x, flat = _as_2d(rhs)
    if ldiag.shape[0] == 0:
        return x[:, 0] if flat else x
    _solve_cols(ldiag, lsub, x, True, True)
    return x[:, 0] if flat else x


def tridiag_back_solve(ldiag_in, lsub_in, rhs):
    """Solve ``L' x = rhs`` (upper bidiagonal back-substitution)."""
    cdef const double[::1] ldiag = _vec(ldiag_in)
    cdef const double[::1] lsub = _vec(lsub_in)
    x, flat = _as_2d(rhs)
    if ldiag.shape[0] == 0:
        return x[:, 0] if flat else x
    _solve_cols(ldiag, lsub, x, False, True)
    return x[:, 0] if flat else x


cdef void _matvec(const double[::1] diag, const double[::1] sub,
                  const double[:, ::1] x, double[:, ::1] out) nogil:
    cdef Py_ssize_t n = diag.shape[0], ncol = x.shape[1], k, j
    for k in range(n):
        for j in range(ncol):
            out[k, j] = diag[k] * x[k, j]
    for k in range(n - 1):
        for j in range(ncol):
            out[k, j] += sub[k] * x[k + 1, j]
            out[k + 1, j] += sub[k] * x[k, j]


def tridiag_matvec(diag_in, sub_in, x):
    """Product of a symmetric tridiagonal matrix with a vector or matrix."""
    cdef const double[::1] diag = _vec(diag_in)
    cdef const double[::1] sub = _vec(sub_in)
    xx, flat = _as_2d(x)
    out = np.empty_like(xx)
    _matvec(diag, sub, xx, out)
    return out[:, 0] if flat else out


def markov_solve(times_in, double ell_minutes, sigma_in, dvar_in, rhs):
    """Apply ``(diag(dvar) + Q^-1)^-1`` to ``rhs`` and return the log-determinant.

    ``Q`` is the precision of the exponential-kernel process with marginal
    standard deviations ``sigma``. Every ``dvar`` entry must be positive.
    """
    cdef const double[::1] times = _vec(times_in)
    cdef const double[::1] sigma = _vec(sigma_in)
    cdef const double[::1] dvar = _vec(dvar_in)
    cdef Py_ssize_t n = times.shape[0], ncol, k, j
    cdef double logdet_c, logdet = 0.0
    cdiag_arr, csub_arr, logdet_c = correlation_precision(times_in, ell_minutes)
    cdef double[::1] cdiag = cdiag_arr
    cdef double[::1] csub = csub_arr
    x_arr, flat = _as_2d(rhs)
    if n == 0:
        return (x_arr[:, 0] if flat else x_arr), 0.0
    cdef double[:, ::1] x = x_arr
    ncol = x.shape[1]
    w_arr = np.empty(n)
    pdiag_arr = np.empty(n)
    psub_arr = np.empty(max(n - 1, 0))
    ldiag_arr = np.empty(n)
    lsub_arr = np.empty(max(n - 1, 0))
    tmp_arr = np.empty((n, ncol))
    cdef double[::1] w = w_arr, pdiag = pdiag_arr, psub = psub_arr
    cdef double[::1] ldiag = ldiag_arr, lsub = lsub_arr
    cdef double[:, ::1] tmp = tmp_arr
    cdef int info
    for k in range(n):
        w[k] = sqrt(dvar[k]) / sigma[k]
        pdiag[k] = w[k] * w[k] * cdiag[k] + 1.0
    for k in range(n - 1):
        psub[k] = w[k] * w[k + 1] * csub[k]
    info = _cholesky(pdiag, psub, ldiag, lsub)
    if info:
        raise NotPositiveDefiniteError(f"leading minor {info} is not positive")
    cdef LogSum acc = LogSum(1.0, 0.0)
    for k in range(n):
        _log_add(&acc, ldiag[k] * sigma[k])
    logdet = 2.0 * _log_value(&acc) - logdet_c
    # x <- W C S^-1 x
    for k in range(n):
        for j in range(ncol):
            x[k, j] /= sigma[k]
    _matvec(cdiag, csub, x, tmp)
    for k in range(n):
        for j in range(ncol):
            tmp[k, j] *= w[k]
    _solve_cols(ldiag, lsub, tmp, True, True)
    for k in range(n):
        for j in range(ncol):
            tmp[k, j] /= sqrt(dvar[k])
    return (tmp_arr[:, 0] if flat else tmp_arr), logdet


def markov_quad_logdet(times_in, double ell_minutes, sigma_in, dvar_in, resid_in):
    """Return ``(r' Sigma^-1 r, log|Sigma|)`` in one forward sweep."""
    cdef const double[::1] times = _vec(times_in)
    cdef const double[::1] sigma = _vec(sigma_in)
    cdef const double[::1] dvar = _vec(dvar_in)
    cdef const double[::1] resid = _vec(resid_in)
    cdef Py_ssize_t n = times.shape[0], k
    cdef double scale = 60.0 * ell_minutes
    cdef double delta, e1, denom, a_next
    cdef double w_k, w_prev = 0.0, isd_k, p_diag, l_prev = 0.0, l_sub_prev
    cdef double quad = 0.0
    cdef double u_k, sr_k, cx
    cdef LogSum acc = LogSum(1.0, 0.0)
    if n == 0:
        return 0.0, 0.0
    # Single forward sweep: build C and P row by row, factor P, and
    # forward-solve L y = W C S^-1 r. Back substitution is avoided because
    # r' D^-1/2 P^-1 v = (L^-1 D^-1/2 r)' (L^-1 v).
    y_arr = np.empty(n)
    z_arr = np.empty(n)
    csub_arr = np.zeros(max(n - 1, 0))
    cdiag_arr = np.ones(n)
    sr_arr = np.empty(n)
    cdef double[::1] y = y_arr, z = z_arr, csub = csub_arr, cdiag = cdiag_arr
    cdef double[::1] rs = sr_arr
    for k in range(n - 1):
        delta = (times[k + 1] - times[k]) / scale
        if delta <= 0.0:
            raise ValueError(f"non-increasing times at index {k + 1}")
        if delta > UNDERFLOW_DELTA:
            continue
        _coupling(delta, &e1, &denom)
        a_next = e1 * e1 / denom
        cdiag[k] += a_next
        cdiag[k + 1] += a_next
        csub[k] = -e1 / denom
        # log|C^-1| = sum log(denom)
        _log_add(&acc, denom)
    for k in range(n):
        rs[k] = resid[k] / sigma[k]
    l_sub_prev = 0.0
    for k in range(n):
        isd_k = 1.0 / sqrt(dvar[k])
        w_k = 1.0 / (isd_k * sigma[k])
        p_diag = w_k * w_k * cdiag[k] + 1.0
        if k > 0:
            l_sub_prev = w_prev * w_k * csub[k - 1] / l_prev
            p_diag -= l_sub_prev * l_sub_prev
        if not p_diag > 0.0:
            raise NotPositiveDefiniteError(f"leading minor {k + 1} is not positive")
        l_prev = sqrt(p_diag)
        _log_add(&acc, p_diag * sigma[k] * sigma[k])
        # v_k = w_k * (C S^-1 r)_k
        cx = cdiag[k] * rs[k]
        if k > 0:
            cx += csub[k - 1] * rs[k - 1]
        if k < n - 1:
            cx += csub[k] * rs[k + 1]
        u_k = w_k * cx
        sr_k = resid[k] * isd_k
        if k > 0:
            u_k -= l_sub_prev * y[k - 1]
            sr_k -= l_sub_prev * z[k - 1]
        y[k] = u_k / l_prev
        z[k] = sr_k / l_prev
        quad += y[k] * z[k]
        w_prev = w_k
    return quad, _log_value(&acc)
