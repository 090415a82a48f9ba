"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a one-line verdict that is printed in the terminal
summary. The OSSE criteria (5, 6, 7) share one 20-replicate study, which
takes about 20 minutes on one core.
"""
import json
import math
import os
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from conftest import dense_exp_cov, random_times, record_criterion
from fluxgibbs.cli import main as cli_main
from fluxgibbs.markov import LOG_2PI, build_xi_precision, error_components, group_loglik
from fluxgibbs.model import (
    CASE_I,
    CASE_II,
    AlphaPrior,
    BasisLibrary,
    ErrorParams,
    ErrorPrior,
    ModelState,
    ObservationGroup,
    Priors,
    RegionPrior,
)
from fluxgibbs.obsop import RetrievalKernel, apply_to_basis, column_average
from fluxgibbs.osse import CONFIGURATIONS, OsseSpec, config_name, osse_study
from fluxgibbs.sampler import (
    SamplerConfig,
    draw_data,
    draw_prior_state,
    gibbs_sweep,
    kappa_log_conditional,
    run_chain,
    sample_error_params,
    sample_kappa,
    sample_tau_w,
    tau_w_conditional,
)
from fluxgibbs.summary import effective_sample_size
from fluxgibbs.transport import build_surrogate

SEED = 20240611


def _grid_cdf(logpdf, lo, hi, n=40_001):
    x = np.linspace(lo, hi, n)
    lp = np.array([logpdf(v) for v in x])
    p = np.exp(lp - lp.max())
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (p[1:] + p[:-1]) * np.diff(x))])
    cdf /= cdf[-1]
    return lambda v: np.interp(v, x, cdf)


def _basis(r_s, r_t, m, rng, scale=1.0):
    resp = rng.normal(size=(m, r_s * r_t)) * scale
    return BasisLibrary(r_s, r_t, resp, np.ones(r_s * r_t), np.zeros(r_s * r_t), ("land",) * r_s)


def _group(rng, m, basis=None, case=CASE_II, p=0, spacing=(5.0, 120.0)):
    resp = basis.response_matrix if basis is not None else rng.normal(size=(m, 3))
    return ObservationGroup(
        group_id="g", times=random_times(rng, m, *spacing), values=rng.normal(size=m),
        prior_mean=np.zeros(m), variances=rng.uniform(0.3, 2.0, m),
        covariates=rng.normal(size=(m, p)), response_rows=resp, error_case=case)


# ------------------------------------------------------------------ 1


def test_criterion_1_precision_exactness():
    rng = np.random.default_rng(SEED + 1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 201))
        times = random_times(rng, n, 0.5, 300.0)
        ell = rng.uniform(0.05, 10.0)
        var = rng.uniform(0.05, 5.0, n)
        prec = build_xi_precision(times, ell, var)
        dense = dense_exp_cov(times, ell, np.sqrt(var))
        worst = max(worst, np.abs(prec.to_dense() @ dense - np.eye(n)).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and elapsed < 60
    record_criterion(1, ok, f"max |Q Sigma - I| = {worst:.2e} over 200 instances ({elapsed:.1f} s)")
    assert ok


# ------------------------------------------------------------------ 2


def test_criterion_2_likelihood_oracle():
    rng = np.random.default_rng(SEED + 2)
    t0 = time.perf_counter()
    worst = 0.0
    settings = [(CASE_II, dict(rho=0.0)), (CASE_II, dict(rho=0.5)), (CASE_II, dict(rho=0.99)),
                (CASE_I, dict(tau_xi=1.7))]
    for i in range(100):
        m = int(rng.integers(1, 201))
        case, extra = settings[i % 4]
        g = _group(rng, m, case=case, p=2)
        params = ErrorParams(gamma=rng.uniform(0.3, 3.0), ell=rng.uniform(0.1, 5.0), **extra)
        state = ModelState(alpha=rng.normal(size=3), beta=[rng.normal(size=2)],
                           kappa=np.zeros(1), tau_w=np.ones(1), error_params=[params])
        resid = (g.values - g.prior_mean - g.response_rows @ state.alpha
                 - g.covariates @ state.beta[0])
        sd, eps = error_components(g, params)
        cov = dense_exp_cov(g.times, params.ell, sd) + np.diag(eps)
        chol = np.linalg.cholesky(cov)
        w = np.linalg.solve(chol, resid)
        dense = -0.5 * (m * LOG_2PI + 2 * np.sum(np.log(np.diag(chol))) + w @ w)
        worst = max(worst, abs(group_loglik(g, state) - dense) / abs(dense))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-8 and elapsed < 60
    record_criterion(2, ok, f"max relative error {worst:.2e} over 100 instances ({elapsed:.1f} s)")
    assert ok


# ------------------------------------------------------------------ 3


def test_criterion_3_conditionals():
    rng = np.random.default_rng(SEED + 3)
    t0 = time.perf_counter()
    results = {}

    # (a) tau_w moments against Gamma(nu + r_t/2, omega + alpha'Q alpha / 2)
    basis = _basis(1, 4, 0, rng)
    rp = RegionPrior.land()
    priors = Priors(AlphaPrior((rp,)), ())
    state = ModelState(alpha=np.array([0.2, -0.1, 0.3, 0.05]), beta=[], kappa=np.array([0.4]),
                       tau_w=np.ones(1), error_params=[])
    shape, rate = tau_w_conditional(state.alpha, 0.4, rp, 4)
    draws = np.array([sample_tau_w(state, basis, priors, rng)[0] for _ in range(100_000)])
    mean, var = shape / rate, shape / rate ** 2
    z_mean = (draws.mean() - mean) / math.sqrt(var / draws.size)
    z_var = (draws.var() - var) / math.sqrt((6 * shape / rate ** 4 + 2 * var ** 2) / draws.size)
    results["tau_w moments"] = (abs(z_mean) < 3 and abs(z_var) < 3,
                                f"z = {z_mean:.2f}, {z_var:.2f}")

    # (b) kappa against a grid oracle, with and without the tau_w coupling factor
    basis6 = _basis(1, 6, 0, rng)
    alpha = np.array([0.1, 0.25, 0.2, 0.35, 0.3, 0.1])
    for plug_in in (False, True):
        cfg = SamplerConfig(n_iterations=1, n_burn_in=0, plug_in_omega=plug_in)
        st = ModelState(alpha=alpha, beta=[], kappa=np.array([0.5]), tau_w=np.array([20.0]),
                        error_params=[])
        ks = []
        for _ in range(25_000):
            st.kappa = sample_kappa(st, basis6, Priors(AlphaPrior((rp,)), ()), rng, cfg)
            ks.append(st.kappa[0])
        cdf = _grid_cdf(lambda k: kappa_log_conditional(k, alpha, 20.0, rp, 6, plug_in)
                        if 0 < k < 1 else -np.inf, 1e-9, 1 - 1e-9)
        p = stats.kstest(ks[::5], cdf).pvalue
        results[f"kappa (plug_in={plug_in})"] = (p > 0.01, f"KS p = {p:.3f}")

    # (b) ell against a grid oracle
    g = ObservationGroup("g", [0.0, 50.0, 130.0], [0.9, 1.1, 0.4], np.zeros(3), [1.0, 1.0, 1.0],
                         np.zeros((3, 0)), np.zeros((3, 1)))
    eprior = ErrorPrior()
    b1 = _basis(1, 1, 3, rng)
    fixed_region = RegionPrior(kappa_fixed=0.0, tau_w_fixed=1.0)
    pri = Priors(AlphaPrior((fixed_region,)), (eprior,))
    cfg = SamplerConfig(n_iterations=1, n_burn_in=0, fixed_error={"gamma": 1.0, "rho": 0.9})
    st = ModelState(alpha=np.zeros(1), beta=[np.zeros(0)], kappa=np.zeros(1), tau_w=np.ones(1),
                    error_params=[ErrorParams(gamma=1.0, rho=0.9, ell=1.0)])
    ells = []
    for _ in range(25_000):
        st.error_params = sample_error_params(st, [g], pri, rng, cfg)
        ells.append(st.error_params[0].ell)

    def ell_logpost(ell):
        if ell <= 0:
            return -np.inf
        s = replace(st, error_params=[ErrorParams(gamma=1.0, rho=0.9, ell=ell)])
        return group_loglik(g, s) + stats.gamma(1.0, scale=1.0).logpdf(ell)

    p = stats.kstest(np.array(ells)[::5], _grid_cdf(ell_logpost, 1e-6, 25.0)).pvalue
    results["ell"] = (p > 0.01, f"KS p = {p:.3f}")

    # (c) gamma at rho = 0 against the conjugate inverse gamma
    gg = _group(rng, 25, basis=_basis(1, 1, 25, rng), spacing=(5.0, 90.0))
    cfg = SamplerConfig(n_iterations=1, n_burn_in=0, fixed_error={"rho": 0.0})
    st = ModelState(alpha=np.zeros(1), beta=[np.zeros(0)], kappa=np.zeros(1), tau_w=np.ones(1),
                    error_params=[ErrorParams(gamma=1.0, rho=0.0, ell=1.0)])
    gammas = []
    for _ in range(20_000):
        st.error_params = sample_error_params(st, [gg], pri, rng, cfg)
        gammas.append(st.error_params[0].gamma)
    oracle = stats.invgamma(eprior.gamma_shape + gg.m / 2,
                            scale=eprior.gamma_rate + 0.5 * np.sum(gg.values ** 2 / gg.variances))
    p = stats.kstest(np.array(gammas)[::4], oracle.cdf).pvalue
    results["gamma at rho=0"] = (p > 0.01, f"KS p = {p:.3f}")

    elapsed = time.perf_counter() - t0
    ok = all(v[0] for v in results.values()) and elapsed < 600
    detail = "; ".join(f"{k}: {v[1]}" for k, v in results.items())
    record_criterion(3, ok, f"{detail} ({elapsed:.0f} s)")
    assert ok, results


# ------------------------------------------------------------------ 4


def _gir_problem(rng):
    r_s, r_t, m = 2, 3, 40
    basis = BasisLibrary(r_s, r_t, 0.5 * rng.normal(size=(m, r_s * r_t)), np.ones(6),
                         np.zeros(6), ("land", "land"))
    g = ObservationGroup("g", random_times(rng, m, 20.0, 90.0), np.zeros(m), np.zeros(m),
                         rng.uniform(0.5, 1.5, m), rng.normal(size=(m, 2)), basis.response_matrix)
    # Proper, moderately informative priors keep the successive-conditional
    # chain mixing well enough for 1e4 sweeps; one region keeps the coupled rate.
    priors = Priors(
        AlphaPrior((RegionPrior(kappa_a=2, kappa_b=2, tau_w_shape=3, tau_w_rate=3),
                    RegionPrior(kappa_a=2, kappa_b=3, tau_w_shape=4, tau_w_rate=2,
                                rate_coupled=False))),
        (ErrorPrior(gamma_shape=4, gamma_rate=3, ell_shape=3, ell_rate=3),),
        sigma2_beta=1.0)
    return basis, [g], priors


def _flatten(state):
    p = state.error_params[0]
    return np.r_[state.alpha, state.beta[0], state.kappa, state.tau_w, p.gamma, p.rho, p.ell]


GIR_NAMES = ([f"alpha[{i}]" for i in range(6)] + ["beta[0]", "beta[1]", "kappa[0]", "kappa[1]",
                                                   "tau_w[0]", "tau_w[1]", "gamma", "rho", "ell"])


def test_criterion_4_getting_it_right():
    rng = np.random.default_rng(SEED + 4)
    t0 = time.perf_counter()
    basis, groups, priors = _gir_problem(rng)
    config = SamplerConfig(n_iterations=1, n_burn_in=0)
    n = 10_000
    marginal = np.array([_flatten(draw_prior_state(basis, groups, priors, config, rng))
                         for _ in range(n)])
    state = draw_prior_state(basis, groups, priors, config, rng)
    data = draw_data(state, groups, rng)
    successive = np.empty_like(marginal)
    for i in range(n):
        state = gibbs_sweep(state, data, basis, priors, config, rng)
        data = draw_data(state, groups, rng)
        successive[i] = _flatten(state)
    pvals = {}
    for k, name in enumerate(GIR_NAMES):
        # Thin to roughly independent draws so the two-sample KS is valid.
        thin = max(1, math.ceil(n / effective_sample_size(successive[:, k])))
        pvals[name] = stats.ks_2samp(successive[::thin, k], marginal[:, k]).pvalue
    elapsed = time.perf_counter() - t0
    worst = min(pvals, key=pvals.get)
    ok = all(p > 0.001 for p in pvals.values()) and elapsed < 1200
    record_criterion(4, ok, f"{len(pvals)} marginals, min KS p = {pvals[worst]:.4f} ({worst}), "
                            f"{n} sweeps ({elapsed:.0f} s)")
    assert ok, pvals


# ------------------------------------------------------------------ 5, 6, 7


@pytest.fixture(scope="module")
def osse_results():
    t0 = time.perf_counter()
    spec = OsseSpec(n_replicates=20, base_seed=SEED)
    dataset = build_surrogate()
    base = SamplerConfig(n_iterations=1500, n_burn_in=500)
    rows, _ = osse_study(spec, dataset, base, threads=os.cpu_count() or 1)
    return spec, rows, time.perf_counter() - t0


def _by_replicate(rows):
    out = {}
    for r in rows:
        out.setdefault(r["replicate"], {})[r["config"]] = r
    return out


FULL = config_name("on", "on")
NONE = config_name("off", "off")


def test_criterion_5_osse_ordering(osse_results):
    spec, rows, elapsed = osse_results
    reps = _by_replicate(rows)
    assert all(len(v) == 4 for v in reps.values())
    share = {}
    for metric in ("rmse", "crps"):
        best = sum(min(v.values(), key=lambda r: r[metric])["config"] == FULL for v in reps.values())
        worst = sum(max(v.values(), key=lambda r: r[metric])["config"] == NONE for v in reps.values())
        share[metric] = (best / len(reps), worst / len(reps))
    means = {name: np.mean([v[name]["rmse"] for v in reps.values()])
             for name in (config_name(b, c) for b, c in CONFIGURATIONS)}
    ok = all(b >= 0.8 and w >= 0.8 for b, w in share.values()) and elapsed < 7200
    detail = (f"full model best in RMSE {share['rmse'][0]:.0%} / CRPS {share['crps'][0]:.0%}, "
              f"no-bias-no-corr worst in RMSE {share['rmse'][1]:.0%} / CRPS {share['crps'][1]:.0%}; "
              + ", ".join(f"{k} mean RMSE {v:.3f}" for k, v in means.items())
              + f" ({elapsed / 60:.0f} min)")
    record_criterion(5, ok, detail)
    assert ok


def test_criterion_6_bias_recovery(osse_results):
    spec, rows, _ = osse_results
    reps = _by_replicate(rows)
    truth = spec.beta_true
    hits = 0
    for v in reps.values():
        r = v[FULL]
        inside = all(abs(r[f"beta_mean[{gid}][{k}]"] - truth[k]) <= 3 * r[f"beta_sd[{gid}][{k}]"]
                     for gid in ("LG", "LN") for k in range(len(truth)))
        hits += inside
    ok = hits >= 18
    record_criterion(6, ok, f"all six bias coefficients within 3 sd in {hits}/{len(reps)} replicates")
    assert ok


def test_criterion_7_coverage(osse_results):
    _, rows, _ = osse_results
    reps = _by_replicate(rows)
    full = [v[FULL] for v in reps.values()]
    rate = sum(r["n_covered"] for r in full) / sum(r["n_cells"] for r in full)
    # Dropping the correlated errors should make intervals narrower (overconfident).
    narrower = np.median([v[config_name("on", "off")]["median_width"] / v[FULL]["median_width"]
                          for v in reps.values()])
    ok = 0.88 <= rate <= 0.99
    record_criterion(7, ok, f"pooled 95% coverage {rate:.3f} over {len(full)} replicates; "
                            f"corr-off / corr-on median width ratio {narrower:.2f}")
    assert ok
    assert narrower < 1.0


# ------------------------------------------------------------------ 8


def test_criterion_8_prior_percentiles():
    rng = np.random.default_rng(SEED + 8)
    t0 = time.perf_counter()
    n = 2_000_000
    land = RegionPrior.land()
    kappa = rng.beta(land.kappa_a, land.kappa_b, n)
    tau = rng.gamma(land.tau_w_shape, 1.0 / (land.tau_w_rate * (1.0 - kappa ** 2)))
    # The stated quantity is 1/tau_w, read as the marginal variance of alpha.
    land_pct = np.percentile(1.0 / tau, [5, 95])
    stationary_pct = np.percentile(1.0 / (tau * (1.0 - kappa ** 2)), [5, 95])
    ep = ErrorPrior()
    gamma = 1.0 / rng.gamma(ep.gamma_shape, 1.0 / ep.gamma_rate, n)
    gamma_pct = np.percentile(gamma, [5, 95])
    elapsed = time.perf_counter() - t0
    land_ok = bool(np.all(np.abs(land_pct / np.array([0.01, 10.0]) - 1) <= 0.1))
    gamma_ok = bool(np.all(np.abs(gamma_pct / np.array([0.5, 10.0]) - 1) <= 0.1))
    ok = land_ok and gamma_ok and elapsed < 60
    record_criterion(8, ok, (
        f"land 1/tau_w 5%/95% = {land_pct[0]:.3g}/{land_pct[1]:.3g} (target 0.01/10, "
        f"{'ok' if land_ok else 'off'}; stationary variance gives "
        f"{stationary_pct[0]:.3g}/{stationary_pct[1]:.3g}); gamma = {gamma_pct[0]:.3f}/"
        f"{gamma_pct[1]:.3f} (target 0.5/10, {'ok' if gamma_ok else 'off'})"))
    assert gamma_ok
    assert land_ok, "land prior percentiles are not reproducible from the stated hyperparameters"


# ------------------------------------------------------------------ 9


def test_criterion_9_observation_operator():
    rng = np.random.default_rng(SEED + 9)
    errs = []
    k = RetrievalKernel(rng.dirichlet(np.ones(20)), rng.uniform(0.3, 1.2, 20),
                        rng.uniform(380, 420, 20))
    errs.append(abs(column_average(k, k.prior_profile) - k.prior_column))
    unit = RetrievalKernel(k.weights, np.ones(20), k.prior_profile)
    profile = rng.uniform(380, 420, 20)
    errs.append(abs(column_average(unit, profile) - k.weights @ profile))
    hand = RetrievalKernel([0.5, 0.5], [1.0, 0.5], [400.0, 400.0])
    errs.append(abs(column_average(hand, [402.0, 404.0]) - 402.0))
    errs.append(float(np.abs(apply_to_basis(k, np.zeros((20, 4)))).max()))
    ok = max(errs) <= 1e-12
    record_criterion(9, ok, f"max error over the operator examples {max(errs):.1e}")
    assert ok


# ------------------------------------------------------------------ 10


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"sampler": {"n_iterations": 150, "n_burn_in": 50}}))
    out = tmp_path / "run"
    base = ["--config", str(cfg), "--output-dir", str(out)]
    for cmd in ("surrogate-basis", "osse-generate"):
        assert cli_main([cmd, *base]) == 0
    files = ("alpha.bin", "beta.csv", "hyper.csv", "errors.csv", "chain.json")
    runs = []
    for _ in range(2):
        assert cli_main(["run", *base, "--seed", "7"]) == 0
        runs.append({f: (out / "chain" / f).read_bytes() for f in files})
    same = all(runs[0][f] == runs[1][f] for f in files)
    # The in-memory chain is bitwise reproducible too.
    rng = np.random.default_rng(SEED + 10)
    basis, groups, priors = _gir_problem(rng)
    config = SamplerConfig(n_iterations=200, n_burn_in=20, seed=3)
    a, b = run_chain(config, groups, basis, priors), run_chain(config, groups, basis, priors)
    same_mem = all(getattr(a, f).tobytes() == getattr(b, f).tobytes()
                   for f in ("alpha", "beta", "kappa", "tau_w", "gamma", "rho", "ell"))
    ok = same and same_mem
    record_criterion(10, ok, f"chain files byte-identical across two CLI runs: {same}; "
                             f"in-memory chains identical: {same_mem}")
    assert ok
