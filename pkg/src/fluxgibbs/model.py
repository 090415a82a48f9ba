"""Domain types, priors and the deterministic data-model mean.

Scaling factors are ordered region-major, period-minor: column
``j * r_t + k`` belongs to region ``j`` and period ``k``.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

CASE_I = "i"
CASE_II = "ii"
LAND = "land"
OCEAN = "ocean"


@dataclass(frozen=True)
class BasisLibrary:
    """Region-period flux basis, its response matrix and flux integrals.

    ``response_matrix`` has one row per observation (all groups, in file
    order) and one column per basis function. ``flux_integrals`` and
    ``prior_flux_integrals`` are in mass units per period (PgC).
    """

    r_s: int
    r_t: int
    response_matrix: np.ndarray
    flux_integrals: np.ndarray
    prior_flux_integrals: np.ndarray
    region_type: tuple

    def __post_init__(self):
        r = self.r_s * self.r_t
        resp = np.asarray(self.response_matrix, dtype=np.float64)
        if resp.ndim != 2 or resp.shape[1] != r:
            raise ValueError(f"response matrix must have {r} columns, got shape {resp.shape}")
        if not np.all(np.isfinite(resp)):
            raise ValueError("response matrix contains non-finite entries")
        for name in ("flux_integrals", "prior_flux_integrals"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (r,):
                raise ValueError(f"{name} must have length {r}")
            object.__setattr__(self, name, arr)
        if len(self.region_type) != self.r_s:
            raise ValueError(f"region_type must have {self.r_s} entries")
        bad = [t for t in self.region_type if t not in (LAND, OCEAN)]
        if bad:
            raise ValueError(f"unknown region types {bad}")
        object.__setattr__(self, "response_matrix", resp)
        object.__setattr__(self, "region_type", tuple(self.region_type))

    @property
    def r(self) -> int:
        return self.r_s * self.r_t

    def index(self, region: int, period: int) -> int:
        if not (0 <= region < self.r_s and 0 <= period < self.r_t):
            raise IndexError(f"(region={region}, period={period}) out of range")
        return region * self.r_t + period

    def cell(self, column: int) -> tuple:
        return divmod(column, self.r_t)

    def region_slice(self, region: int) -> slice:
        return slice(region * self.r_t, (region + 1) * self.r_t)


@dataclass(frozen=True)
class ObservationGroup:
    """One instrument group's time-ordered observations.

    ``covariates`` are already standardized (see ``standardize_covariates``);
    ``covariate_scale`` holds the divisors used, so raw-unit coefficients are
    ``beta / covariate_scale``. A group without a bias model has a
    ``(m, 0)`` covariate matrix.
    """

    group_id: str
    times: np.ndarray
    values: np.ndarray
    prior_mean: np.ndarray
    variances: np.ndarray
    covariates: np.ndarray
    response_rows: np.ndarray
    error_case: str = CASE_II
    role: str = "training"
    covariate_scale: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        m = times.shape[0]
        for name in ("values", "prior_mean", "variances"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (m,):
                raise ValueError(f"group {self.group_id!r}: {name} must have length {m}")
            object.__setattr__(self, name, arr)
        cov = np.asarray(self.covariates, dtype=np.float64)
        if cov.ndim == 1 and cov.size == 0:
            cov = cov.reshape(m, 0)
        if cov.ndim != 2 or cov.shape[0] != m:
            raise ValueError(f"group {self.group_id!r}: covariates must be (m, p)")
        resp = np.asarray(self.response_rows, dtype=np.float64)
        if resp.ndim != 2 or resp.shape[0] != m:
            raise ValueError(f"group {self.group_id!r}: response rows must be (m, r)")
        if np.any(~(self.variances > 0)):
            k = int(np.argmax(~(self.variances > 0)))
            raise ValueError(
                f"group {self.group_id!r}: prescribed variance at index {k} is not positive"
            )
        if m > 1:
            steps = np.diff(times)
            if np.any(steps <= 0):
                k = int(np.argmax(steps <= 0)) + 1
                kind = "duplicate" if steps[k - 1] == 0 else "decreasing"
                raise ValueError(
                    f"group {self.group_id!r}: {kind} timestamp at index {k} "
                    "(merge coincident observations first)"
                )
        if self.error_case not in (CASE_I, CASE_II):
            raise ValueError(f"error_case must be {CASE_I!r} or {CASE_II!r}")
        if self.role not in ("training", "holdout"):
            raise ValueError("role must be 'training' or 'holdout'")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "covariates", cov)
        object.__setattr__(self, "response_rows", resp)
        if self.covariate_scale is None:
            object.__setattr__(self, "covariate_scale", np.ones(cov.shape[1]))

    @property
    def m(self) -> int:
        return self.times.shape[0]

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    def with_values(self, values) -> "ObservationGroup":
        return _replace(self, values=np.asarray(values, dtype=np.float64))


def _replace(group, **changes):
    kwargs = {f: getattr(group, f) for f in group.__dataclass_fields__}
    kwargs.update(changes)
    return type(group)(**kwargs)


def merge_coincident(times, values, variances, *others):
    """Average observations sharing a timestamp, inverse-variance weighted.

    ``others`` are extra per-observation arrays (1-D or 2-D) averaged with
    the same weights. Returns the merged ``times, values, variances, *others``.
    """
    times = np.asarray(times, dtype=np.float64)
    order = np.argsort(times, kind="stable")
    times = times[order]
    uniq, inverse = np.unique(times, return_inverse=True)
    w = 1.0 / np.asarray(variances, dtype=np.float64)[order]
    wsum = np.bincount(inverse, weights=w)

    def wmean(arr):
        arr = np.asarray(arr, dtype=np.float64)[order]
        if arr.ndim == 1:
            return np.bincount(inverse, weights=w * arr) / wsum
        return np.stack(
            [np.bincount(inverse, weights=w * col) / wsum for col in arr.T], axis=1
        ).reshape(len(uniq), *arr.shape[1:])

    return (uniq, wmean(values), 1.0 / wsum, *[wmean(o) for o in others])


def standardize_covariates(raw):
    """Scale each covariate column to unit empirical variance.

    The empirical variance uses the population divisor ``m``. Columns are
    scaled, not centred. Returns ``(standardized, scale)`` with
    ``standardized = raw / scale``.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim == 1:
        raw = raw[:, None]
    if raw.shape[1] == 0:
        return raw.copy(), np.ones(0)
    scale = raw.std(axis=0, ddof=0)
    for j, s in enumerate(scale):
        if not s > 0:
            raise ValueError(f"covariate column {j} has zero empirical variance")
    return raw / scale, scale


# ---------------------------------------------------------------- priors


@dataclass(frozen=True)
class RegionPrior:
    """Prior on one region's autoregressive parameters.

    Either ``kappa_fixed`` or the Beta ``(kappa_a, kappa_b)`` pair is used;
    likewise ``tau_w_fixed`` or the Gamma ``(tau_w_shape, tau_w_rate)``. When
    ``rate_coupled`` the Gamma rate is ``tau_w_rate * (1 - kappa**2)``.
    """

    kappa_a: float = 1.0
    kappa_b: float = 1.0
    kappa_fixed: Optional[float] = None
    tau_w_shape: float = 0.354
    tau_w_rate: float = 1.0 / 0.0153
    rate_coupled: bool = True
    tau_w_fixed: Optional[float] = None

    def __post_init__(self):
        if self.kappa_fixed is None:
            if not (self.kappa_a > 0 and self.kappa_b > 0):
                raise ValueError("Beta hyperparameters must be positive")
        elif not 0.0 <= self.kappa_fixed < 1.0:
            raise ValueError("fixed kappa must lie in [0, 1)")
        if self.tau_w_fixed is None:
            if not (self.tau_w_shape > 0 and self.tau_w_rate > 0):
                raise ValueError("Gamma hyperparameters must be positive")
        elif not self.tau_w_fixed > 0:
            raise ValueError("fixed tau_w must be positive")

    def omega(self, kappa: float) -> float:
        if self.rate_coupled:
            return self.tau_w_rate * (1.0 - kappa * kappa)
        return self.tau_w_rate

    @classmethod
    def land(cls):
        return cls()

    @classmethod
    def ocean(cls):
        return cls(kappa_fixed=0.0, tau_w_fixed=4.0)


@dataclass(frozen=True)
class AlphaPrior:
    regions: tuple

    @property
    def r_s(self) -> int:
        return len(self.regions)

    @classmethod
    def from_region_types(cls, region_type, land=None, ocean=None):
        land = land or RegionPrior.land()
        ocean = ocean or RegionPrior.ocean()
        return cls(tuple(land if t == LAND else ocean for t in region_type))


@dataclass(frozen=True)
class ErrorPrior:
    """Hyperparameters of one group's error model.

    gamma ~ IG(gamma_shape, gamma_rate); ell ~ Ga(ell_shape, ell_rate) with
    ``ell_rate`` in 1/minutes; tau_xi ~ Ga(tau_xi_shape, tau_xi_rate) (Case i);
    rho ~ Unif(0, 1) (Case ii).
    """

    gamma_shape: float = 1.627
    gamma_rate: float = 2.171
    ell_shape: float = 1.0
    ell_rate: float = 1.0
    tau_xi_shape: float = 1.0
    tau_xi_rate: float = 1.0

    def __post_init__(self):
        for name in self.__dataclass_fields__:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class Priors:
    alpha: AlphaPrior
    errors: tuple
    sigma2_beta: float = 100.0

    def __post_init__(self):
        if not self.sigma2_beta > 0:
            raise ValueError("sigma2_beta must be positive")


# ----------------------------------------------------------------- state


@dataclass
class ErrorParams:
    gamma: float = 1.0
    ell: float = 1.0
    rho: Optional[float] = None
    tau_xi: Optional[float] = None

    def validate(self, case: str):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.ell > 0:
            raise ValueError("ell must be positive")
        if case == CASE_II:
            if self.rho is None or not 0.0 <= self.rho <= 1.0:
                raise ValueError("Case (ii) requires rho in [0, 1]")
        else:
            if self.tau_xi is None or not self.tau_xi > 0:
                raise ValueError("Case (i) requires tau_xi > 0")


@dataclass
class ModelState:
    alpha: np.ndarray
    beta: list
    kappa: np.ndarray
    tau_w: np.ndarray
    error_params: list = field(default_factory=list)

    def copy(self) -> "ModelState":
        return copy.deepcopy(self)

    def validate(self, basis: BasisLibrary, groups: Sequence[ObservationGroup]):
        if self.alpha.shape != (basis.r,):
            raise ValueError("alpha has wrong length")
        if self.kappa.shape != (basis.r_s,) or self.tau_w.shape != (basis.r_s,):
            raise ValueError("kappa/tau_w have wrong length")
        if np.any(self.kappa < 0) or np.any(self.kappa >= 1):
            raise ValueError("kappa outside [0, 1)")
        if np.any(~(self.tau_w > 0)):
            raise ValueError("tau_w must be positive")
        if len(self.beta) != len(groups) or len(self.error_params) != len(groups):
            raise ValueError("one beta/error-parameter entry per group required")
        for g, b, e in zip(groups, self.beta, self.error_params):
            if np.shape(b) != (g.p,):
                raise ValueError(f"beta for group {g.group_id!r} has wrong length")
            e.validate(g.error_case)


# ------------------------------------------------------------- operations


def predicted_mean(state: ModelState, groups: Sequence[ObservationGroup]):
    """Per-group data-model mean ``z0 + Psi alpha + A beta``."""
    alpha = np.asarray(state.alpha, dtype=np.float64)
    if len(state.beta) != len(groups):
        raise ValueError("one beta vector per group required")
    out = []
    for g, beta in zip(groups, state.beta):
        if g.response_rows.shape[1] != alpha.shape[0]:
            raise ValueError(
                f"group {g.group_id!r}: response rows have {g.response_rows.shape[1]} "
                f"columns, alpha has {alpha.shape[0]}"
            )
        beta = np.asarray(beta, dtype=np.float64)
        if beta.shape != (g.p,):
            raise ValueError(f"group {g.group_id!r}: beta must have length {g.p}")
        mean = g.prior_mean + g.response_rows @ alpha
        if g.p:
            mean = mean + g.covariates @ beta
        out.append(mean)
    return out


def ar1_bands(kappa: float, r_t: int):
    """Diagonal and off-diagonal of the unit-innovation AR(1) precision."""
    if not -1.0 < kappa < 1.0:
        raise ValueError(f"|kappa| must be < 1, got {kappa}")
    diag = np.full(r_t, 1.0 + kappa * kappa)
    diag[0] = diag[-1] = 1.0
    return diag, np.full(max(r_t - 1, 0), -kappa)


def ar1_quadratic_form(x, kappa: float) -> float:
    """``x' Q(kappa) x`` for the AR(1) precision with unit corners."""
    x = np.asarray(x, dtype=np.float64)
    total = float(x @ x)
    if x.shape[0] > 2:
        total += kappa * kappa * float(x[1:-1] @ x[1:-1])
    if x.shape[0] > 1:
        total -= 2.0 * kappa * float(x[:-1] @ x[1:])
    return total


def alpha_prior_precision(kappa, tau_w, r_t: int):
    """Block-diagonal sparse prior precision of the scaling factors."""
    kappa = np.atleast_1d(np.asarray(kappa, dtype=np.float64))
    tau_w = np.atleast_1d(np.asarray(tau_w, dtype=np.float64))
    if kappa.shape != tau_w.shape:
        raise ValueError("kappa and tau_w must have one entry per region")
    if np.any(~(tau_w > 0)):
        raise ValueError("tau_w must be positive")
    blocks = []
    for k, t in zip(kappa, tau_w):
        diag, off = ar1_bands(k, r_t)
        blocks.append(t * sp.diags([off, diag, off], [-1, 0, 1], shape=(r_t, r_t)))
    return sp.block_diag(blocks, format="csr")
