"""Posterior summaries: flux aggregates, holdout predictions, diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .model import LAND, OCEAN, BasisLibrary, ObservationGroup
from .sampler import ChainOutput

def nearest_rank_quantile(samples, q, axis: int = 0):
    """Nearest-rank quantile: the ``ceil(q n)``-th smallest sample."""
    x = np.sort(np.asarray(samples, dtype=np.float64), axis=axis)
    n = x.shape[axis]
    if n == 0:
        raise ValueError("no samples")
    k = min(max(int(math.ceil(q * n)) - 1, 0), n - 1)
    return np.take(x, k, axis=axis)


# ------------------------------------------------------------------ fluxes


@dataclass(frozen=True)
class FluxAggregate:
    scope: str
    regions: tuple
    periods: tuple
    totals: np.ndarray
    mean: float
    sd: float
    lower: float
    upper: float


def scope_regions(basis: BasisLibrary, scope: str) -> tuple:
    """Region indices for ``global``, ``land`` or ``ocean``."""
    if scope == "global":
        return tuple(range(basis.r_s))
    if scope in (LAND, OCEAN):
        return tuple(j for j, t in enumerate(basis.region_type) if t == scope)
    raise ValueError(f"unknown scope {scope!r}")


def aggregate_flux(chain: ChainOutput, basis: BasisLibrary, regions: Sequence[int],
                   periods: Optional[Sequence[int]] = None, name: str = "") -> FluxAggregate:
    """Per-sample flux totals over a set of region-period cells.

    Each sample's total is the sum over the cells of
    ``prior_flux_integral + alpha * flux_integral``.
    """
    regions = tuple(int(j) for j in regions)
    periods = tuple(range(basis.r_t)) if periods is None else tuple(int(k) for k in periods)
    if not regions or not periods:
        raise ValueError("empty aggregation scope")
    cols = np.array([basis.index(j, k) for j in regions for k in periods])
    totals = (basis.prior_flux_integrals[cols].sum()
              + chain.alpha[:, cols] @ basis.flux_integrals[cols])
    return FluxAggregate(
        scope=name,
        regions=regions,
        periods=periods,
        totals=totals,
        mean=float(totals.mean()),
        sd=float(totals.std(ddof=1)) if totals.size > 1 else 0.0,
        lower=float(nearest_rank_quantile(totals, 0.025)),
        upper=float(nearest_rank_quantile(totals, 0.975)),
    )


def standard_aggregates(chain: ChainOutput, basis: BasisLibrary) -> list:
    """Global/land/ocean totals for the whole horizon and for each period."""
    out = []
    for scope in ("global", LAND, OCEAN):
        regions = scope_regions(basis, scope)
        if not regions:
            continue
        out.append(aggregate_flux(chain, basis, regions, name=f"{scope}/all"))
        for k in range(basis.r_t):
            out.append(aggregate_flux(chain, basis, regions, [k], name=f"{scope}/period{k}"))
    return out


# ------------------------------------------------------------------ holdout


@dataclass(frozen=True)
class HoldoutPrediction:
    group_id: str
    mean: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    error_variance: float


def _mixture_quantile(centres, sd, q, iters=100):
    """Quantile of an equal-weight Gaussian mixture, per column, by bisection."""
    lo = centres.min(axis=0) - 10.0 * sd
    hi = centres.max(axis=0) + 10.0 * sd
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        cdf = ndtr((mid[None, :] - centres) / sd).mean(axis=0)
        below = cdf < q
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo < 1e-10 * (1.0 + np.abs(mid))):
            break
    return 0.5 * (lo + hi)


def predict_holdout(chain: ChainOutput, group: ObservationGroup,
                    error_variance: Optional[float] = None, level: float = 0.95,
                    max_samples: Optional[int] = None) -> HoldoutPrediction:
    """Posterior predictive for a group left out of the fit.

    The group's bias is zero and its errors are fully correlated with a
    single variance, by default the mean of its prescribed variances. The
    error is integrated analytically: the predictive law is the equal-weight
    mixture of ``N(z0 + Psi alpha_s, error_variance)`` over samples.
    """
    if group.response_rows.shape[1] != chain.alpha.shape[1]:
        raise ValueError(f"group {group.group_id!r} has no response rows for this basis")
    var = float(np.mean(group.variances)) if error_variance is None else float(error_variance)
    if not var > 0:
        raise ValueError("error variance must be positive")
    alpha = chain.alpha
    if max_samples is not None and alpha.shape[0] > max_samples:
        alpha = alpha[np.linspace(0, alpha.shape[0] - 1, max_samples).astype(int)]
    centres = group.prior_mean[None, :] + alpha @ group.response_rows.T
    sd = math.sqrt(var)
    tail = (1.0 - level) / 2.0
    if centres.shape[0] == 1:
        z = float(ndtri(1.0 - tail))
        lower, upper = centres[0] - z * sd, centres[0] + z * sd
    else:
        lower = _mixture_quantile(centres, sd, tail)
        upper = _mixture_quantile(centres, sd, 1.0 - tail)
    return HoldoutPrediction(group.group_id, centres.mean(axis=0), lower, upper, var)


def prediction_errors(pred: HoldoutPrediction, observed) -> dict:
    """Mean and standard deviation of the errors, plus MSE and coverage."""
    err = np.asarray(observed, dtype=np.float64) - pred.mean
    inside = (pred.lower <= observed) & (observed <= pred.upper)
    return {
        "mean_error": float(err.mean()),
        "sd_error": float(err.std(ddof=1)) if err.size > 1 else 0.0,
        "mse": float(np.mean(err ** 2)),
        "coverage": float(np.mean(inside)),
    }


# ------------------------------------------------------------------ diagnostics


@dataclass(frozen=True)
class Diagnostic:
    name: str
    n: int
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float
    ess: float
    degenerate: bool


def autocorrelation(x) -> np.ndarray:
    """Sample autocorrelation at every lag via FFT (biased estimator)."""
    x = np.asarray(x, dtype=np.float64) - np.mean(x)
    n = x.shape[0]
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n] / n
    return acov / acov[0]


def effective_sample_size(x) -> float:
    """ESS with Geyer's initial positive sequence.

    Autocorrelations are summed in adjacent pairs until the first pair whose
    sum is negative. Returns ``nan`` for a constant chain.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < 2 or np.all(x == x[0]):
        return math.nan
    rho = autocorrelation(x)
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        total += pair
    tau = max(2.0 * total - 1.0, 1e-12)
    return min(n / tau, float(n) * math.log10(n)) if n > 1 else float(n)


def chain_diagnostics(chain: ChainOutput) -> list:
    """Per-scalar summaries and ESS; fixed or constant traces are flagged."""
    out = []
    for name, trace in chain.scalar_traces().items():
        trace = np.asarray(trace, dtype=np.float64)
        degenerate = bool(trace.size < 2 or np.all(trace == trace[0]))
        out.append(Diagnostic(
            name=name,
            n=int(trace.size),
            mean=float(trace.mean()),
            sd=float(trace.std(ddof=1)) if trace.size > 1 else 0.0,
            q025=float(nearest_rank_quantile(trace, 0.025)),
            q50=float(nearest_rank_quantile(trace, 0.5)),
            q975=float(nearest_rank_quantile(trace, 0.975)),
            ess=math.nan if degenerate else effective_sample_size(trace),
            degenerate=degenerate,
        ))
    return out
