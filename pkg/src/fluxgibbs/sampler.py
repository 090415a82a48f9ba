"""Gibbs sampler over scaling factors, bias coefficients and error parameters.

Each iteration runs four steps in order:

1. joint Gaussian draw of ``(alpha, beta)``;
2. slice-sampled ``kappa`` per free region;
3. direct Gamma draw of ``tau_w`` per free region;
4. per-group slice sweeps over the error-model parameters.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from . import kernels
from .errors import NotPositiveDefiniteError
from .markov import GroupCovariance, error_components, gaussian_loglik_resid, sample_xi
from .model import (
    CASE_I,
    CASE_II,
    BasisLibrary,
    ErrorParams,
    ModelState,
    ObservationGroup,
    Priors,
    alpha_prior_precision,
    ar1_bands,
    ar1_quadratic_form,
    predicted_mean,
)
from .slice import SliceStats, slice_sample

log = logging.getLogger(__name__)

ERROR_PARAM_NAMES = ("gamma", "rho", "tau_xi", "ell")

DEFAULT_WIDTHS = {
    "kappa": 0.25,
    "gamma": 0.5,
    "rho": 1.0,
    "tau_xi": 1.0,
    "ell": 1.0,
}


class SamplerError(RuntimeError):
    pass


@dataclass
class SamplerConfig:
    """Chain length, seed and slice-sampler controls.

    ``widths`` are initial slice widths on the sampling scale (raw for kappa,
    log for gamma/ell/tau_xi, logit for rho). ``fixed_error`` pins error
    parameters for every group, e.g. ``{"rho": 0.0}``; a list value gives one
    entry per group.
    """

    n_iterations: int = 11_000
    n_burn_in: int = 1_000
    seed: int = 0
    thin: int = 1
    widths: dict = field(default_factory=lambda: dict(DEFAULT_WIDTHS))
    max_step_out: int = 50
    fix_beta: bool = False
    fixed_error: dict = field(default_factory=dict)
    plug_in_omega: bool = False
    progress_every: int = 0

    def __post_init__(self):
        if not 0 <= self.n_burn_in < self.n_iterations:
            raise ValueError("burn-in must be smaller than the number of iterations")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        widths = dict(DEFAULT_WIDTHS)
        widths.update(self.widths)
        self.widths = widths
        if any(not w > 0 for w in widths.values()):
            raise ValueError("slice widths must be positive")
        if self.max_step_out < 1:
            raise ValueError("max_step_out must be at least 1")
        unknown = set(self.fixed_error) - set(ERROR_PARAM_NAMES)
        if unknown:
            raise ValueError(f"unknown error parameters {sorted(unknown)}")

    @property
    def n_kept(self) -> int:
        return len(range(0, self.n_iterations - self.n_burn_in, self.thin))

    def fixed_value(self, name: str, g: int):
        if name not in self.fixed_error:
            return None
        value = self.fixed_error[name]
        if isinstance(value, (list, tuple, np.ndarray)):
            value = value[g]
        return None if value is None else float(value)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=_jsonable)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(type(obj))


@dataclass
class ChainOutput:
    """Post-burn-in samples stored as arrays, one row per kept iteration."""

    alpha: np.ndarray
    beta: np.ndarray
    beta_sizes: tuple
    kappa: np.ndarray
    tau_w: np.ndarray
    gamma: np.ndarray
    rho: np.ndarray
    tau_xi: np.ndarray
    ell: np.ndarray
    group_ids: tuple
    error_cases: tuple
    seed: int
    config_hash: str = ""
    counters: dict = field(default_factory=dict)

    def __len__(self):
        return self.alpha.shape[0]

    def beta_for(self, g: int) -> np.ndarray:
        start = int(sum(self.beta_sizes[:g]))
        return self.beta[:, start:start + self.beta_sizes[g]]

    def state(self, i: int) -> ModelState:
        params = []
        for g, case in enumerate(self.error_cases):
            params.append(ErrorParams(
                gamma=float(self.gamma[i, g]),
                ell=float(self.ell[i, g]),
                rho=float(self.rho[i, g]) if case == CASE_II else None,
                tau_xi=float(self.tau_xi[i, g]) if case == CASE_I else None,
            ))
        return ModelState(
            alpha=self.alpha[i].copy(),
            beta=[self.beta_for(g)[i].copy() for g in range(len(self.beta_sizes))],
            kappa=self.kappa[i].copy(),
            tau_w=self.tau_w[i].copy(),
            error_params=params,
        )

    def states(self):
        for i in range(len(self)):
            yield self.state(i)

    def scalar_traces(self) -> dict:
        """Named 1-D traces of every sampled scalar, for diagnostics."""
        out = {}
        for j in range(self.alpha.shape[1]):
            out[f"alpha[{j}]"] = self.alpha[:, j]
        for g, gid in enumerate(self.group_ids):
            for k in range(self.beta_sizes[g]):
                out[f"beta[{gid}][{k}]"] = self.beta_for(g)[:, k]
        for j in range(self.kappa.shape[1]):
            out[f"kappa[{j}]"] = self.kappa[:, j]
            out[f"tau_w[{j}]"] = self.tau_w[:, j]
        for g, gid in enumerate(self.group_ids):
            out[f"gamma[{gid}]"] = self.gamma[:, g]
            out[f"ell[{gid}]"] = self.ell[:, g]
            if self.error_cases[g] == CASE_II:
                out[f"rho[{gid}]"] = self.rho[:, g]
            else:
                out[f"tau_xi[{gid}]"] = self.tau_xi[:, g]
        return out


# ------------------------------------------------------------ initial state


def _training(groups):
    return [(g, grp) for g, grp in enumerate(groups) if grp.role == "training"]


def initial_state(basis: BasisLibrary, groups: Sequence[ObservationGroup],
                  priors: Priors, config: SamplerConfig) -> ModelState:
    kappa = np.empty(basis.r_s)
    tau_w = np.empty(basis.r_s)
    for j, rp in enumerate(priors.alpha.regions):
        kappa[j] = rp.kappa_fixed if rp.kappa_fixed is not None else rp.kappa_a / (rp.kappa_a + rp.kappa_b)
        tau_w[j] = rp.tau_w_fixed if rp.tau_w_fixed is not None else rp.tau_w_shape / rp.omega(kappa[j])
    params = []
    for g, grp in enumerate(groups):
        ep = priors.errors[g]
        p = ErrorParams(gamma=1.0, ell=ep.ell_shape / ep.ell_rate)
        if grp.error_case == CASE_II:
            p.rho = 0.5
        else:
            p.tau_xi = ep.tau_xi_shape / ep.tau_xi_rate
        for name in ERROR_PARAM_NAMES:
            value = config.fixed_value(name, g)
            if value is not None and getattr(p, name) is not None:
                setattr(p, name, value)
        params.append(p)
    return ModelState(
        alpha=np.zeros(basis.r),
        beta=[np.zeros(g.p) for g in groups],
        kappa=kappa,
        tau_w=tau_w,
        error_params=params,
    )


# ------------------------------------------------------------ step 1: alpha, beta


def alpha_beta_conditional(state: ModelState, groups: Sequence[ObservationGroup],
                           basis: BasisLibrary, priors: Priors, fix_beta: bool = False):
    """Mean and Cholesky factor of the Gaussian full conditional of ``(alpha, beta)``.

    Returns ``(mean, chol, beta_index)`` where ``chol`` is the lower Cholesky
    factor of the conditional precision and ``beta_index`` maps each group to
    its slice of the stacked vector (``None`` when beta is held fixed).
    """
    r = basis.r
    offsets = []
    size = r
    for grp in groups:
        if fix_beta or grp.role != "training":
            offsets.append(None)
        else:
            offsets.append(slice(size, size + grp.p))
            size += grp.p
    prec = np.zeros((size, size))
    rhs = np.zeros(size)
    for g, grp in _training(groups):
        y = grp.values - grp.prior_mean
        cols = [grp.response_rows]
        if offsets[g] is None:
            if grp.p:
                y = y - grp.covariates @ state.beta[g]
        elif grp.p:
            cols.append(grp.covariates)
        design = np.hstack(cols) if len(cols) > 1 else cols[0]
        handle = GroupCovariance.for_group(grp, state.error_params[g])
        solved = handle.solve(np.hstack([design, y[:, None]]))
        idx = np.r_[0:r, np.arange(size)[offsets[g]]] if offsets[g] is not None else np.arange(r)
        prec[np.ix_(idx, idx)] += design.T @ solved[:, :-1]
        rhs[idx] += design.T @ solved[:, -1]
    prec[:r, :r] += alpha_prior_precision(state.kappa, state.tau_w, basis.r_t).toarray()
    if size > r:
        prec[r:, r:] += np.eye(size - r) / priors.sigma2_beta
    prec = 0.5 * (prec + prec.T)
    try:
        chol = sla.cholesky(prec, lower=True)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError("conditional precision of (alpha, beta) is not PD") from exc
    mean = sla.cho_solve((chol, True), rhs)
    return mean, chol, offsets


def sample_alpha_beta(state, groups, basis, priors, rng, fix_beta=False):
    """Joint draw of the scaling factors and bias coefficients."""
    mean, chol, offsets = alpha_beta_conditional(state, groups, basis, priors, fix_beta)
    z = rng.standard_normal(mean.shape[0])
    x = mean + sla.solve_triangular(chol, z, lower=True, trans="T")
    alpha = x[: basis.r].copy()
    beta = []
    for g, grp in enumerate(groups):
        if offsets[g] is None:
            beta.append(np.asarray(state.beta[g], dtype=np.float64).copy())
        else:
            beta.append(x[offsets[g]].copy())
    return alpha, beta


# ------------------------------------------------------------ steps 2 and 3


def ar1_logdet(kappa: float, r_t: int, method: str = "closed") -> float:
    """``log|Q(kappa)|`` in closed form or via the tridiagonal Cholesky factor.

    With unit corners the determinant is ``1 - kappa**2`` for every
    ``r_t >= 2`` (and 1 when ``r_t == 1``).
    """
    if method == "closed":
        return math.log1p(-kappa * kappa) if r_t > 1 else 0.0
    diag, off = ar1_bands(kappa, r_t)
    ldiag, _ = kernels.tridiag_cholesky(diag, off)
    return float(2.0 * np.sum(np.log(ldiag)))


def kappa_log_conditional(kappa, alpha_j, tau_w, region_prior, r_t, plug_in_omega=False,
                          logdet_method="closed"):
    """Unnormalized log full conditional of one region's ``kappa``."""
    if not 0.0 < kappa < 1.0:
        return -math.inf
    out = 0.5 * ar1_logdet(kappa, r_t, logdet_method)
    out -= 0.5 * tau_w * ar1_quadratic_form(alpha_j, kappa)
    a, b = region_prior.kappa_a, region_prior.kappa_b
    if a != 1.0:
        out += (a - 1.0) * math.log(kappa)
    if b != 1.0:
        out += (b - 1.0) * math.log1p(-kappa)
    if region_prior.tau_w_fixed is None and region_prior.rate_coupled and not plug_in_omega:
        omega = region_prior.omega(kappa)
        out += region_prior.tau_w_shape * math.log(omega) - omega * tau_w
    return out


def sample_kappa(state, basis, priors, rng, config=None, stats=None):
    config = config or SamplerConfig(n_iterations=1, n_burn_in=0)
    kappa = state.kappa.copy()
    for j, rp in enumerate(priors.alpha.regions):
        if rp.kappa_fixed is not None:
            continue
        alpha_j = state.alpha[basis.region_slice(j)]
        tau = float(state.tau_w[j])

        def target(k, alpha_j=alpha_j, tau=tau, rp=rp):
            return kappa_log_conditional(k, alpha_j, tau, rp, basis.r_t, config.plug_in_omega)

        kappa[j], _ = slice_sample(
            target, float(kappa[j]), config.widths["kappa"], config.max_step_out, rng, stats=stats
        )
    return kappa


def tau_w_conditional(alpha_j, kappa, region_prior, r_t):
    """Shape and rate of the Gamma full conditional of ``tau_w``."""
    shape = region_prior.tau_w_shape + 0.5 * r_t
    rate = region_prior.omega(kappa) + 0.5 * ar1_quadratic_form(alpha_j, kappa)
    return shape, rate


def sample_tau_w(state, basis, priors, rng):
    tau_w = state.tau_w.copy()
    for j, rp in enumerate(priors.alpha.regions):
        if rp.tau_w_fixed is not None:
            continue
        shape, rate = tau_w_conditional(state.alpha[basis.region_slice(j)], state.kappa[j], rp, basis.r_t)
        tau_w[j] = rng.gamma(shape, 1.0 / rate)
    return tau_w


# ------------------------------------------------------------ step 4


def _log_sigmoid(u):
    return -math.log1p(math.exp(-u)) if u > -30 else u - math.log1p(math.exp(u))


def _rho_from_logit(u):
    return 1.0 / (1.0 + math.exp(-u)) if u > -700 else 0.0


def _error_targets(grp, prior):
    """Transformed-scale log priors with Jacobians, keyed by parameter."""

    def gamma_lp(u):
        # IG(a, b) on gamma = exp(u), times d gamma / du
        return -prior.gamma_shape * u - prior.gamma_rate * math.exp(-u)

    def ell_lp(u):
        return prior.ell_shape * u - prior.ell_rate * math.exp(u)

    def tau_xi_lp(u):
        return prior.tau_xi_shape * u - prior.tau_xi_rate * math.exp(u)

    def rho_lp(u):
        return _log_sigmoid(u) + _log_sigmoid(-u)

    return {
        "gamma": (math.log, math.exp, gamma_lp),
        "ell": (math.log, math.exp, ell_lp),
        "tau_xi": (math.log, math.exp, tau_xi_lp),
        "rho": (lambda r: math.log(r) - math.log1p(-r), _rho_from_logit, rho_lp),
    }


def sample_error_params(state, groups, priors, rng, config=None, stats=None):
    """Univariate slice sweeps over each training group's error parameters."""
    config = config or SamplerConfig(n_iterations=1, n_burn_in=0)
    preds = predicted_mean(state, groups)
    out = [ErrorParams(**asdict(p)) for p in state.error_params]
    for g, grp in _training(groups):
        resid = grp.values - preds[g]
        params = out[g]
        targets = _error_targets(grp, priors.errors[g])
        names = ["gamma", "rho" if grp.error_case == CASE_II else "tau_xi", "ell"]
        for name in names:
            if config.fixed_value(name, g) is not None:
                continue
            if name == "ell" and grp.error_case == CASE_II and params.rho == 0.0:
                continue  # length scale does not enter the likelihood
            to_u, from_u, log_prior = targets[name]

            def target(u, name=name, from_u=from_u, log_prior=log_prior):
                value = from_u(u)
                if name == "rho" and not 0.0 < value < 1.0:
                    return -math.inf
                if not value > 0 or not math.isfinite(value):
                    return -math.inf
                trial = ErrorParams(**asdict(params))
                setattr(trial, name, value)
                try:
                    ll = gaussian_loglik_resid(grp, trial, resid)
                except (NotPositiveDefiniteError, FloatingPointError, ValueError):
                    return -math.inf
                return ll + log_prior(u)

            u0 = to_u(getattr(params, name))
            u1, _ = slice_sample(target, u0, config.widths[name], config.max_step_out, rng, stats=stats)
            setattr(params, name, from_u(u1))
    return out


# ------------------------------------------------------------ chain


def _record(arrays, i, state, groups):
    arrays["alpha"][i] = state.alpha
    if arrays["beta"].shape[1]:
        arrays["beta"][i] = np.concatenate([np.asarray(b, dtype=np.float64) for b in state.beta])
    arrays["kappa"][i] = state.kappa
    arrays["tau_w"][i] = state.tau_w
    for g, p in enumerate(state.error_params):
        arrays["gamma"][i, g] = p.gamma
        arrays["ell"][i, g] = p.ell
        arrays["rho"][i, g] = np.nan if p.rho is None else p.rho
        arrays["tau_xi"][i, g] = np.nan if p.tau_xi is None else p.tau_xi


def gibbs_sweep(state, groups, basis, priors, config, rng, stats=None):
    """One full pass of the four conditional-sampling steps, in order."""
    state = state.copy()
    state.alpha, state.beta = sample_alpha_beta(state, groups, basis, priors, rng, config.fix_beta)
    state.kappa = sample_kappa(state, basis, priors, rng, config, stats)
    state.tau_w = sample_tau_w(state, basis, priors, rng)
    state.error_params = sample_error_params(state, groups, priors, rng, config, stats)
    return state


def run_chain(config: SamplerConfig, groups: Sequence[ObservationGroup], basis: BasisLibrary,
              priors: Priors, initial: Optional[ModelState] = None,
              config_hash: str = "") -> ChainOutput:
    """Run the Gibbs sampler and return post-burn-in samples."""
    if not any(g.role == "training" for g in groups):
        raise ValueError("at least one training group is required")
    if len(priors.errors) != len(groups):
        raise ValueError("one error prior per group required")
    if priors.alpha.r_s != basis.r_s:
        raise ValueError("alpha prior must cover every region")
    rng = np.random.default_rng(config.seed)
    state = initial.copy() if initial is not None else initial_state(basis, groups, priors, config)
    state.validate(basis, groups)
    n_keep = config.n_kept
    n_groups = len(groups)
    arrays = {
        "alpha": np.empty((n_keep, basis.r)),
        "beta": np.empty((n_keep, sum(g.p for g in groups))),
        "kappa": np.empty((n_keep, basis.r_s)),
        "tau_w": np.empty((n_keep, basis.r_s)),
        "gamma": np.empty((n_keep, n_groups)),
        "rho": np.empty((n_keep, n_groups)),
        "tau_xi": np.empty((n_keep, n_groups)),
        "ell": np.empty((n_keep, n_groups)),
    }
    stats = SliceStats()
    kept = 0
    for it in range(config.n_iterations):
        try:
            state = gibbs_sweep(state, groups, basis, priors, config, rng, stats)
        except Exception as exc:
            raise SamplerError(f"iteration {it}: {exc}") from exc
        post = it - config.n_burn_in
        if post >= 0 and post % config.thin == 0:
            _record(arrays, kept, state, groups)
            kept += 1
        if config.progress_every and (it + 1) % config.progress_every == 0:
            log.info("iteration %d/%d", it + 1, config.n_iterations)
    return ChainOutput(
        beta_sizes=tuple(g.p for g in groups),
        group_ids=tuple(g.group_id for g in groups),
        error_cases=tuple(g.error_case for g in groups),
        seed=config.seed,
        config_hash=config_hash or config.digest(),
        counters={
            "iterations": config.n_iterations,
            "kept": kept,
            "slice_calls": stats.calls,
            "slice_evaluations": stats.evaluations,
            "slice_retries": stats.retries,
        },
        **arrays,
    )


# ------------------------------------------------------------ forward simulation


def draw_alpha(kappa, tau_w, r_t, rng):
    """Prior draw of the scaling factors given the AR(1) parameters."""
    out = []
    for k, t in zip(np.atleast_1d(kappa), np.atleast_1d(tau_w)):
        diag, off = ar1_bands(float(k), r_t)
        ldiag, lsub = kernels.tridiag_cholesky(t * diag, t * off)
        out.append(kernels.tridiag_back_solve(ldiag, lsub, rng.standard_normal(r_t)))
    return np.concatenate(out)


def draw_prior_state(basis, groups, priors, config, rng) -> ModelState:
    """Draw every unknown from its prior, honouring fixed values."""
    kappa = np.empty(basis.r_s)
    tau_w = np.empty(basis.r_s)
    for j, rp in enumerate(priors.alpha.regions):
        kappa[j] = rp.kappa_fixed if rp.kappa_fixed is not None else rng.beta(rp.kappa_a, rp.kappa_b)
        if rp.tau_w_fixed is not None:
            tau_w[j] = rp.tau_w_fixed
        else:
            tau_w[j] = rng.gamma(rp.tau_w_shape, 1.0 / rp.omega(kappa[j]))
    alpha = draw_alpha(kappa, tau_w, basis.r_t, rng)
    beta = []
    params = []
    for g, grp in enumerate(groups):
        if config.fix_beta:
            beta.append(np.zeros(grp.p))
        else:
            beta.append(rng.normal(0.0, math.sqrt(priors.sigma2_beta), grp.p))
        ep = priors.errors[g]
        p = ErrorParams(
            gamma=1.0 / rng.gamma(ep.gamma_shape, 1.0 / ep.gamma_rate),
            ell=rng.gamma(ep.ell_shape, 1.0 / ep.ell_rate),
        )
        if grp.error_case == CASE_II:
            p.rho = rng.random()
        else:
            p.tau_xi = rng.gamma(ep.tau_xi_shape, 1.0 / ep.tau_xi_rate)
        for name in ERROR_PARAM_NAMES:
            value = config.fixed_value(name, g)
            if value is not None and getattr(p, name) is not None:
                setattr(p, name, value)
        params.append(p)
    return ModelState(alpha=alpha, beta=beta, kappa=kappa, tau_w=tau_w, error_params=params)


def draw_data(state, groups, rng):
    """Simulate observations from the data model; returns new groups."""
    means = predicted_mean(state, groups)
    out = []
    for g, (grp, mean) in enumerate(zip(groups, means)):
        params = state.error_params[g]
        sd, eps = error_components(grp, params)
        noise = np.sqrt(eps) * rng.standard_normal(grp.m)
        if np.all(sd > 0):
            noise += sample_xi(grp.times, params.ell, sd ** 2, rng)
        out.append(grp.with_values(mean + noise))
    return out
