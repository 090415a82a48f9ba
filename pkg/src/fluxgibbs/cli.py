"""Command-line entry point.

Subcommands share one JSON configuration (see ``DEFAULT_CONFIG``) whose
sections are merged over the defaults. Artifacts record the hash of the
configuration sections that determine them, and consumers refuse inputs
whose hash disagrees with the current configuration.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import io as fio
from .errors import ConfigMismatchError
from .model import CASE_I, CASE_II, AlphaPrior, ErrorPrior, Priors, RegionPrior
from .osse import (
    OsseData,
    OsseSpec,
    build_groups,
    config_name,
    configuration,
    generate_truth,
    osse_study,
    simulate_observations,
    truth_fluxes,
)
from .sampler import SamplerConfig, run_chain
from .summary import chain_diagnostics, predict_holdout, prediction_errors, standard_aggregates
from .transport import SurrogateDataset, SurrogateGrid, TrackSpec, build_surrogate

log = logging.getLogger("fluxgibbs")

DEFAULT_CONFIG = {
    "seed": 0,
    "paths": {
        "basis": "basis.json",
        "observations": "observations.csv",
        "kernels": "kernels.csv",
        "track": "track.csv",
        "chain": "chain",
    },
    "priors": {
        "sigma2_beta": 100.0,
        "land": {"kappa_a": 1.0, "kappa_b": 1.0, "tau_w_shape": 0.354,
                 "tau_w_rate": 1.0 / 0.0153, "rate_coupled": True},
        "ocean": {"kappa_fixed": 0.0, "tau_w_fixed": 4.0},
        "errors": {"gamma_shape": 1.627, "gamma_rate": 2.171, "ell_shape": 1.0,
                   "ell_rate": 1.0, "tau_xi_shape": 1.0, "tau_xi_rate": 1.0},
        "group_errors": {},
    },
    "sampler": {"n_iterations": 11000, "n_burn_in": 1000, "thin": 1, "widths": {},
                "max_step_out": 50, "progress_every": 0},
    "features": {"bias": "on", "correlated": "on", "error_case": CASE_II,
                 "plug_in_omega": False},
    "surrogate": {
        "grid": {"n_lon": 36, "n_lat": 18, "wind": 0.5, "diffusion": 0.1, "dt": 1.0,
                 "step_seconds": 3600.0},
        "r_t": 6, "period_steps": 240, "n_levels": 20, "background": 400.0,
        "basis": {}, "track": {},
    },
    "osse": {"alpha_variance": 0.09, "beta_true": [0.3, 0.028, 0.6], "gamma": 1.25,
             "rho": 0.8, "ell": 1.0, "n_replicates": 20, "base_seed": 0,
             "exclude_fixed_regions": False, "obs_sd_range": [0.5, 1.0]},
    "study": {"n_iterations": 1500, "n_burn_in": 500, "thin": 1},
    "summarize": {"level": 0.95, "max_samples": 2000},
}

# Sections that determine each kind of artifact.
STAGES = {
    "surrogate": ("surrogate",),
    "data": ("surrogate", "osse"),
    "chain": ("surrogate", "osse", "priors", "sampler", "features", "seed"),
    "study": ("surrogate", "osse", "priors", "study", "features"),
    "summary": ("surrogate", "osse", "priors", "sampler", "features", "seed", "summarize"),
}


def merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and out[key]:
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, seed=None, command=None) -> dict:
    """Merge a JSON file over the defaults and apply the ``--seed`` override.

    ``--seed`` sets the data seed (``osse.base_seed``) for the data
    commands and the chain seed otherwise.
    """
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            user = json.load(fh)
        unknown = set(user) - set(DEFAULT_CONFIG)
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        cfg = merge(cfg, user)
    if seed is not None:
        if command in ("osse-generate", "osse-study"):
            cfg["osse"]["base_seed"] = int(seed)
        else:
            cfg["seed"] = int(seed)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    f = cfg["features"]
    for key in ("bias", "correlated"):
        if f[key] not in ("on", "off"):
            raise ValueError(f"features.{key} must be 'on' or 'off'")
    cases = f["error_case"]
    for gid, case in (cases.items() if isinstance(cases, dict) else [("*", cases)]):
        if case not in (CASE_I, CASE_II):
            raise ValueError(f"features.error_case for {gid}: expected 'i' or 'ii', got {case!r}")
    # Constructing the objects runs their own checks.
    build_priors(cfg, ["*"], ("land",))
    sampler_config(cfg)
    osse_spec(cfg)


def stage_hash(cfg: dict, stage: str) -> str:
    return fio.config_hash({k: cfg[k] for k in STAGES[stage]})


# ------------------------------------------------------------------ builders


def build_priors(cfg: dict, group_ids, region_type) -> Priors:
    p = cfg["priors"]
    alpha = AlphaPrior.from_region_types(
        region_type, land=RegionPrior(**p["land"]), ocean=RegionPrior(**p["ocean"]))
    errors = tuple(ErrorPrior(**{**p["errors"], **p["group_errors"].get(gid, {})})
                   for gid in group_ids)
    return Priors(alpha, errors, sigma2_beta=float(p["sigma2_beta"]))


def sampler_config(cfg: dict, section: str = "sampler") -> SamplerConfig:
    s = dict(cfg["sampler"])
    if section != "sampler":
        s.update(cfg[section])
    f = cfg["features"]
    base = SamplerConfig(seed=int(cfg["seed"]), plug_in_omega=bool(f["plug_in_omega"]), **s)
    return configuration(base, f["bias"], f["correlated"])


def osse_spec(cfg: dict) -> OsseSpec:
    o = dict(cfg["osse"])
    o["beta_true"] = tuple(o["beta_true"])
    o["obs_sd_range"] = tuple(o["obs_sd_range"])
    return OsseSpec(**o)


def error_cases(cfg: dict, group_ids) -> dict:
    cases = cfg["features"]["error_case"]
    if isinstance(cases, dict):
        unknown = set(cases) - set(group_ids)
        if unknown:
            raise ValueError(f"features.error_case names unknown groups {sorted(unknown)}")
        return {gid: cases.get(gid, CASE_II) for gid in group_ids}
    return {gid: cases for gid in group_ids}


def surrogate_from_config(cfg: dict) -> SurrogateDataset:
    s = cfg["surrogate"]
    return build_surrogate(
        grid=SurrogateGrid(**s["grid"]), r_t=s["r_t"], period_steps=s["period_steps"],
        n_levels=s["n_levels"], background=s["background"],
        basis_kwargs=s["basis"], track_kwargs=s["track"])


# ------------------------------------------------------------------ input handling


def _path(cfg, out: Path, key: str) -> Path:
    p = Path(cfg["paths"][key])
    return p if p.is_absolute() else out / p


def _expect(name: str, found, expected: str):
    if found is not None and found != expected:
        raise ConfigMismatchError(
            f"{name} was produced under config hash {found}, current configuration "
            f"gives {expected}; regenerate it or use the matching config")


def load_inputs(cfg: dict, out: Path):
    """Basis, observation groups and kernels named by the configuration."""
    out = Path(out)
    for key in ("basis", "observations"):
        if not _path(cfg, out, key).exists():
            raise FileNotFoundError(f"paths.{key}: {_path(cfg, out, key)} does not exist")
    basis, basis_hash = fio.read_basis(_path(cfg, out, "basis"))
    _expect("basis", basis_hash, stage_hash(cfg, "surrogate"))
    obs_path = _path(cfg, out, "observations")
    ids = _group_ids(obs_path)
    groups, obs_hash = fio.read_observations(obs_path, basis.response_matrix,
                                             error_cases(cfg, ids))
    _expect("observations", obs_hash, stage_hash(cfg, "data"))
    kernels = None
    kpath = _path(cfg, out, "kernels")
    if kpath.exists():
        kernels, k_hash = fio.read_kernels(kpath)
        _expect("kernels", k_hash, stage_hash(cfg, "surrogate"))
    return basis, groups, kernels


def _group_ids(path) -> list:
    rows = fio._rows(path)
    return list(dict.fromkeys(r[0] for r in rows[1:]))


def write_track(path, track: TrackSpec, z0, hash_value: str) -> None:
    rows = [{"group": track.group_ids[track.group[i]], "time_unix_s": float(track.times[i]),
             "ilat": int(track.ilat[i]), "ilon": int(track.ilon[i]), "z0_ppm": float(z0[i]),
             "role": track.roles[track.group[i]]} for i in range(track.m)]
    fio.write_table(path, rows, hash_value,
                    ["group", "time_unix_s", "ilat", "ilon", "z0_ppm", "role"])


def read_track(path):
    rows = fio.read_table(path)
    ids, roles = [], []
    for r in rows:
        if r["group"] not in ids:
            ids.append(r["group"])
            roles.append(r["role"])
    track = TrackSpec(
        times=np.array([float(r["time_unix_s"]) for r in rows]),
        ilat=np.array([int(r["ilat"]) for r in rows]),
        ilon=np.array([int(r["ilon"]) for r in rows]),
        group=np.array([ids.index(r["group"]) for r in rows]),
        group_ids=tuple(ids),
        roles=tuple(roles),
    )
    return track, np.array([float(r["z0_ppm"]) for r in rows]), fio.read_hash(path)


# ------------------------------------------------------------------ subcommands


def cmd_surrogate_basis(cfg, out: Path, args) -> list:
    ds = surrogate_from_config(cfg)
    h = stage_hash(cfg, "surrogate")
    fio.write_basis(out, ds.basis, h)
    fio.write_kernels(_path(cfg, out, "kernels"), ds.kernels, h)
    write_track(_path(cfg, out, "track"), ds.track, ds.prior_mean, h)
    return ["basis.json", "response.bin", cfg["paths"]["kernels"], cfg["paths"]["track"]]


def cmd_osse_generate(cfg, out: Path, args) -> list:
    basis, b_hash = fio.read_basis(_path(cfg, out, "basis"))
    track, z0, t_hash = read_track(_path(cfg, out, "track"))
    _expect("basis", b_hash, stage_hash(cfg, "surrogate"))
    _expect("track", t_hash, stage_hash(cfg, "surrogate"))
    spec = osse_spec(cfg)
    grid = SurrogateGrid(**cfg["surrogate"]["grid"])
    ds = SurrogateDataset(grid, None, track, [], basis, z0)
    seed = spec.seeds[0]
    rng = np.random.default_rng(seed)
    priors = build_priors(cfg, track.group_ids, basis.region_type)
    alpha = generate_truth(spec, basis, rng, priors)
    groups = simulate_observations(spec, alpha, build_groups(ds, spec, rng), rng)
    data = OsseData(alpha, groups, seed)
    h = stage_hash(cfg, "data")
    # Lines follow the track so they stay aligned with the response matrix.
    rank = np.empty(track.m, dtype=int)
    for g in range(len(track.group_ids)):
        rank[track.rows(g)] = np.arange(track.rows(g).size)
    order = [(int(track.group[i]), int(rank[i])) for i in range(track.m)]
    fio.write_observations(_path(cfg, out, "observations"), data.groups, h, line_order=order)
    flux = truth_fluxes(alpha, basis)
    rows = [{"region": j, "period": k, "alpha_true": float(alpha[basis.index(j, k)]),
             "flux_true_pgc": float(flux[basis.index(j, k)]),
             "flux_prior_pgc": float(basis.prior_flux_integrals[basis.index(j, k)])}
            for j in range(basis.r_s) for k in range(basis.r_t)]
    fio.write_table(out / "truth.csv", rows, h)
    return [cfg["paths"]["observations"], "truth.csv"]


def cmd_run(cfg, out: Path, args) -> list:
    basis, groups, _ = load_inputs(cfg, out)
    training = [g for g in groups if g.role == "training"]
    priors = build_priors(cfg, [g.group_id for g in training], basis.region_type)
    config = sampler_config(cfg)
    h = stage_hash(cfg, "chain")
    chain = run_chain(config, training, basis, priors, config_hash=h)
    chain_dir = _path(cfg, out, "chain")
    fio.write_chain(chain_dir, chain, h)
    rel = chain_dir.relative_to(out) if chain_dir.is_relative_to(out) else chain_dir
    return [str(rel / n) for n in ("alpha.bin", "beta.csv", "hyper.csv", "errors.csv",
                                   "chain.json")]


def cmd_osse_study(cfg, out: Path, args) -> list:
    spec = osse_spec(cfg)
    ds = surrogate_from_config(cfg)
    base = replace(sampler_config(cfg, "study"), fix_beta=False, fixed_error={})
    rows, _ = osse_study(spec, ds, base, threads=args.threads)
    h = stage_hash(cfg, "study")
    fio.write_table(out / "scores.csv", rows, h)
    summary = []
    names = list(dict.fromkeys(r["config"] for r in rows))
    for name in names:
        sub = [r for r in rows if r["config"] == name]
        summary.append({
            "config": name,
            "n_replicates": len(sub),
            "rmse_mean": float(np.mean([r["rmse"] for r in sub])),
            "crps_mean": float(np.mean([r["crps"] for r in sub])),
            "coverage_pooled": sum(r["n_covered"] for r in sub) / sum(r["n_cells"] for r in sub),
            "median_width": float(np.median([r["median_width"] for r in sub])),
            "best_rmse_share": _share(rows, name, "rmse", min),
            "best_crps_share": _share(rows, name, "crps", min),
            "worst_rmse_share": _share(rows, name, "rmse", max),
            "worst_crps_share": _share(rows, name, "crps", max),
        })
    fio.write_table(out / "scores_summary.csv", summary, h)
    for r in summary:
        log.info("%s: rmse %.4f crps %.4f coverage %.3f", r["config"], r["rmse_mean"],
                 r["crps_mean"], r["coverage_pooled"])
    return ["scores.csv", "scores_summary.csv"]


def _share(rows, name, key, pick) -> float:
    reps = sorted({r["replicate"] for r in rows})
    hits = 0
    for rep in reps:
        sub = [r for r in rows if r["replicate"] == rep]
        hits += pick(sub, key=lambda r: r[key])["config"] == name
    return hits / len(reps)


def cmd_summarize(cfg, out: Path, args) -> list:
    basis, groups, _ = load_inputs(cfg, out)
    chain, meta = fio.read_chain(_path(cfg, out, "chain"))
    _expect("chain", meta.get("config_hash"), stage_hash(cfg, "chain"))
    h = stage_hash(cfg, "summary")
    s = cfg["summarize"]
    files = []
    aggs = standard_aggregates(chain, basis)
    fio.write_table(out / "flux_aggregates.csv", [
        {"scope": a.scope, "n_samples": a.totals.size, "mean_pgc": a.mean, "sd_pgc": a.sd,
         "q025_pgc": a.lower, "q975_pgc": a.upper} for a in aggs], h)
    files.append("flux_aggregates.csv")
    pred_rows, err_rows = [], []
    for grp in groups:
        if grp.role != "holdout":
            continue
        pred = predict_holdout(chain, grp, level=s["level"], max_samples=s["max_samples"])
        for i in range(grp.m):
            pred_rows.append({"group": grp.group_id, "time_unix_s": float(grp.times[i]),
                              "observed_ppm": float(grp.values[i]),
                              "mean_ppm": float(pred.mean[i]), "lower_ppm": float(pred.lower[i]),
                              "upper_ppm": float(pred.upper[i])})
        stats = prediction_errors(pred, grp.values)
        prior = float(np.mean((grp.values - grp.prior_mean) ** 2))
        err_rows.append({"group": grp.group_id, "n": grp.m, **stats, "prior_mse": prior,
                         "error_variance": pred.error_variance})
    if pred_rows:
        fio.write_table(out / "holdout.csv", pred_rows, h)
        fio.write_table(out / "holdout_errors.csv", err_rows, h)
        files += ["holdout.csv", "holdout_errors.csv"]
    diags = chain_diagnostics(chain)
    fio.write_table(out / "diagnostics.csv", [asdict(d) for d in diags], h)
    traces = chain.scalar_traces()
    names = list(traces)
    fio.write_table(out / "traces.csv",
                    [{"iteration": i, **{n: float(traces[n][i]) for n in names}}
                     for i in range(len(chain))], h, ["iteration"] + names)
    files += ["diagnostics.csv", "traces.csv"]
    return files


COMMANDS = {
    "surrogate-basis": (cmd_surrogate_basis, "surrogate", "build surrogate response files"),
    "osse-generate": (cmd_osse_generate, "data", "simulate a synthetic truth and observations"),
    "run": (cmd_run, "chain", "run one inversion chain"),
    "osse-study": (cmd_osse_study, "study", "replicates under the four setups, with score tables"),
    "summarize": (cmd_summarize, "summary", "flux aggregates, holdout predictions, diagnostics"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fluxgibbs", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, _, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, help="JSON configuration (merged over defaults)")
        p.add_argument("--seed", type=int, help="override the seed")
        p.add_argument("--output-dir", type=Path, default=Path("."),
                       help="directory for inputs and outputs (default: current)")
        p.add_argument("--threads", type=int, default=1, help="worker processes (osse-study)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    func, stage, _ = COMMANDS[args.command]
    try:
        cfg = load_config(args.config, args.seed, args.command)
        out = args.output_dir
        out.mkdir(parents=True, exist_ok=True)
        files = func(cfg, out, args)
        fio.write_manifest(out, args.command, stage_hash(cfg, stage), files,
                           {"config": cfg})
    except (ValueError, FileNotFoundError, ConfigMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
