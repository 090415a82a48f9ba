"""Exponential-kernel correlated errors with a tridiagonal precision.

With observations ordered in time and an exponential covariance, conditioning
each error on its predecessor alone is exact, so the precision of the
correlated component is tridiagonal. The group covariance
``Sigma = Sigma_eps + Q^-1`` is then inverted and its determinant evaluated
in O(m) through the Woodbury identity and the matrix-determinant lemma,
using the well-scaled form ``P = W C W + I`` with ``W = Sigma_eps^1/2 S^-1``
(``C`` the unit-variance precision, ``S`` the marginal standard deviations).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .model import CASE_I, CASE_II, ErrorParams, ModelState, ObservationGroup

LOG_2PI = float(np.log(2.0 * np.pi))


def _check_times(times):
    times = np.asarray(times, dtype=np.float64)
    if times.ndim != 1:
        raise ValueError("times must be one-dimensional")
    steps = np.diff(times)
    if np.any(steps == 0):
        k = int(np.argmax(steps == 0)) + 1
        raise ValueError(f"duplicate timestamp at index {k}; the precision is singular")
    if np.any(steps < 0):
        raise ValueError("times must be strictly increasing")
    return times


@dataclass(frozen=True)
class TridiagonalPrecision:
    n: int
    diag: np.ndarray
    subdiag: np.ndarray
    marginal_sds: np.ndarray

    def to_dense(self) -> np.ndarray:
        return np.diag(self.diag) + np.diag(self.subdiag, 1) + np.diag(self.subdiag, -1)

    def cholesky(self):
        return kernels.tridiag_cholesky(self.diag, self.subdiag)

    def logdet(self) -> float:
        ldiag, _ = self.cholesky()
        return float(2.0 * np.sum(np.log(ldiag)))

    def matvec(self, x):
        return kernels.tridiag_matvec(self.diag, self.subdiag, x)


def build_xi_precision(times, ell, marginal_vars) -> TridiagonalPrecision:
    """Exact tridiagonal inverse of ``sigma_i sigma_j exp(-|t_i - t_j| / ell)``.

    ``times`` are in seconds and ``ell`` in minutes.
    """
    times = _check_times(times)
    if not ell > 0:
        raise ValueError("length scale must be positive")
    var = np.broadcast_to(np.asarray(marginal_vars, dtype=np.float64), times.shape)
    if np.any(~(var > 0)):
        raise ValueError("marginal variances must be positive")
    sd = np.sqrt(var)
    cdiag, csub, _ = kernels.correlation_precision(times, float(ell))
    return TridiagonalPrecision(
        n=times.shape[0],
        diag=cdiag / var,
        subdiag=csub / (sd[:-1] * sd[1:]),
        marginal_sds=sd.copy(),
    )


def error_components(group: ObservationGroup, params: ErrorParams):
    """Marginal sd of the correlated part and variance of the white part."""
    v = group.variances
    if group.error_case == CASE_II:
        rho = float(params.rho)
        return np.sqrt(rho * params.gamma * v), (1.0 - rho) * params.gamma * v
    return np.full(v.shape, 1.0 / np.sqrt(params.tau_xi)), params.gamma * v


class GroupCovariance:
    """Linear-solve handle for ``Sigma_g = Sigma_eps + Sigma_xi``.

    ``solve`` applies ``Sigma_g^-1`` to a vector or tall matrix in
    O(m * ncols); ``logdet`` is ``log|Sigma_g|``.
    """

    def __init__(self, times, ell, xi_sd, eps_var):
        self.times = np.ascontiguousarray(times, dtype=np.float64)
        self.ell = float(ell)
        self.xi_sd = np.ascontiguousarray(xi_sd, dtype=np.float64)
        self.eps_var = np.ascontiguousarray(eps_var, dtype=np.float64)
        if np.any(self.eps_var < 0) or np.any(self.xi_sd < 0):
            raise ValueError("error variances must be non-negative")
        if np.all(self.xi_sd == 0):
            if np.any(~(self.eps_var > 0)):
                raise ValueError("covariance is singular")
            self.mode = "diagonal"
            self.logdet = float(np.sum(np.log(self.eps_var)))
        elif np.all(self.eps_var == 0):
            if np.any(~(self.xi_sd > 0)):
                raise ValueError("covariance is singular")
            self.mode = "correlated"
            self._cdiag, self._csub, logdet_c = kernels.correlation_precision(
                self.times, self.ell
            )
            self.logdet = float(2.0 * np.sum(np.log(self.xi_sd)) - logdet_c)
        elif np.all(self.eps_var > 0) and np.all(self.xi_sd > 0):
            self.mode = "mixed"
            _, self.logdet = kernels.markov_solve(
                self.times, self.ell, self.xi_sd, self.eps_var, np.zeros(self.times.shape[0])
            )
        else:
            raise ValueError("error components must be all zero or all positive")

    @classmethod
    def for_group(cls, group: ObservationGroup, params: ErrorParams):
        sd, eps = error_components(group, params)
        return cls(group.times, params.ell, sd, eps)

    def solve(self, rhs):
        rhs = np.asarray(rhs, dtype=np.float64)
        col = (lambda v: v[:, None]) if rhs.ndim == 2 else (lambda v: v)
        if self.mode == "diagonal":
            return rhs / col(self.eps_var)
        if self.mode == "correlated":
            scaled = rhs / col(self.xi_sd)
            return kernels.tridiag_matvec(self._cdiag, self._csub, scaled) / col(self.xi_sd)
        x, _ = kernels.markov_solve(self.times, self.ell, self.xi_sd, self.eps_var, rhs)
        return x

    def quad(self, resid) -> float:
        resid = np.ascontiguousarray(resid, dtype=np.float64)
        if self.mode == "mixed":
            q, _ = kernels.markov_quad_logdet(
                self.times, self.ell, self.xi_sd, self.eps_var, resid
            )
            return float(q)
        return float(resid @ self.solve(resid))


def solve_and_logdet(group: ObservationGroup, params: ErrorParams):
    """Return ``(handle, log|Sigma_g|)`` for one group's error covariance."""
    params.validate(group.error_case)
    handle = GroupCovariance.for_group(group, params)
    return handle, handle.logdet


def gaussian_loglik_resid(group: ObservationGroup, params: ErrorParams, resid) -> float:
    """Group log-likelihood given the residual ``z - z_pred``.

    The mixed case runs as one fused O(m) pass without building the handle.
    """
    sd, eps = error_components(group, params)
    resid = np.ascontiguousarray(resid, dtype=np.float64)
    m = resid.shape[0]
    if np.all(sd > 0) and np.all(eps > 0):
        quad, logdet = kernels.markov_quad_logdet(
            group.times, float(params.ell), sd, eps, resid
        )
    else:
        handle = GroupCovariance(group.times, params.ell, sd, eps)
        quad, logdet = handle.quad(resid), handle.logdet
    return -0.5 * (m * LOG_2PI + logdet + quad)


def group_loglik(group: ObservationGroup, state: ModelState, index: int = None) -> float:
    """Gaussian log-likelihood of one group's data under ``state``.

    ``index`` locates the group's entries in ``state.beta`` and
    ``state.error_params``; when omitted ``state`` must hold exactly one group.
    """
    if index is None:
        if len(state.beta) != 1:
            raise ValueError("index required when the state holds several groups")
        index = 0
    params = state.error_params[index]
    params.validate(group.error_case)
    beta = np.asarray(state.beta[index], dtype=np.float64)
    pred = group.prior_mean + group.response_rows @ state.alpha
    if group.p:
        pred = pred + group.covariates @ beta
    return gaussian_loglik_resid(group, params, group.values - pred)


def sample_xi(times, ell, marginal_vars, rng) -> np.ndarray:
    """Draw the correlated error by back-substitution against chol(Q)."""
    prec = build_xi_precision(times, ell, marginal_vars)
    if prec.n == 0:
        return np.zeros(0)
    cdiag = prec.diag * prec.marginal_sds ** 2
    csub = prec.subdiag * prec.marginal_sds[:-1] * prec.marginal_sds[1:]
    ldiag, lsub = kernels.tridiag_cholesky(cdiag, csub)
    z = rng.standard_normal(prec.n)
    return prec.marginal_sds * kernels.tridiag_back_solve(ldiag, lsub, z)

