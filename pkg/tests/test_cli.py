import json

import pytest

from fluxgibbs import io as fio
from fluxgibbs.cli import DEFAULT_CONFIG, load_config, main

SMALL = {
    "surrogate": {
        "grid": {"n_lon": 12, "n_lat": 6},
        "r_t": 3, "period_steps": 20, "n_levels": 4,
        "basis": {"lon_blocks": 2, "lat_blocks": 2, "ocean_lon_blocks": [1]},
        "track": {"pass_interval_steps": 3, "soundings_per_pass": 5, "precession_cells": 5,
                  "holdout_sites": [[2, 3]], "holdout_every_steps": 4},
    },
    "sampler": {"n_iterations": 40, "n_burn_in": 10},
    "study": {"n_iterations": 30, "n_burn_in": 10},
    "osse": {"n_replicates": 2},
}

CHAIN_FILES = ("alpha.bin", "beta.csv", "hyper.csv", "errors.csv", "chain.json")


def _config(tmp_path, **update):
    cfg = {**SMALL, **update}
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg))
    return p


def _pipeline(out, cfg, *commands, seed=None):
    for cmd in commands:
        argv = [cmd, "--config", str(cfg), "--output-dir", str(out)]
        if seed is not None:
            argv += ["--seed", str(seed)]
        assert main(argv) == 0, cmd


def test_defaults_match_documented_priors():
    p = DEFAULT_CONFIG["priors"]
    assert p["sigma2_beta"] == 100.0
    assert (p["land"]["kappa_a"], p["land"]["kappa_b"]) == (1.0, 1.0)
    assert p["land"]["tau_w_shape"] == 0.354
    assert p["land"]["tau_w_rate"] == pytest.approx(1 / 0.0153)
    assert p["ocean"] == {"kappa_fixed": 0.0, "tau_w_fixed": 4.0}
    assert (p["errors"]["gamma_shape"], p["errors"]["gamma_rate"]) == (1.627, 2.171)
    assert (p["errors"]["ell_shape"], p["errors"]["ell_rate"]) == (1.0, 1.0)


def test_config_validation(tmp_path):
    with pytest.raises(ValueError, match="bias"):
        load_config(_config(tmp_path, features={"bias": "maybe"}))
    with pytest.raises(ValueError, match="error_case"):
        load_config(_config(tmp_path, features={"error_case": {"LG": "iii"}}))
    with pytest.raises(ValueError, match="positive"):
        load_config(_config(tmp_path, priors={"errors": {"gamma_shape": -1}}))
    with pytest.raises(ValueError, match="sections"):
        load_config(_config(tmp_path, extra={}))
    assert load_config(None, seed=4, command="run")["seed"] == 4
    assert load_config(None, seed=4, command="osse-generate")["osse"]["base_seed"] == 4


def test_end_to_end_and_determinism(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "out"
    _pipeline(out, cfg, "surrogate-basis", "osse-generate", "run", "summarize")
    for name in ("basis.json", "response.bin", "observations.csv", "kernels.csv", "truth.csv",
                 "flux_aggregates.csv", "holdout.csv", "holdout_errors.csv",
                 "diagnostics.csv", "traces.csv"):
        assert (out / name).exists(), name
    for cmd in ("surrogate-basis", "osse-generate", "run", "summarize"):
        manifest = json.loads((out / f"manifest-{cmd}.json").read_text())
        assert manifest["config_hash"] and "numpy" in manifest["versions"]
    first = {n: (out / "chain" / n).read_bytes() for n in CHAIN_FILES}
    _pipeline(out, cfg, "run")
    for n in CHAIN_FILES:
        assert (out / "chain" / n).read_bytes() == first[n], n
    _pipeline(out, cfg, "run", seed=99)
    assert (out / "chain" / "alpha.bin").read_bytes() != first["alpha.bin"]
    assert fio.read_hash(out / "flux_aggregates.csv") is not None


def test_mixed_artifacts_refused(tmp_path, capsys):
    cfg = _config(tmp_path)
    out = tmp_path / "out"
    _pipeline(out, cfg, "surrogate-basis", "osse-generate")
    other = dict(SMALL)
    other["osse"] = {"n_replicates": 2, "gamma": 2.0}
    cfg2 = tmp_path / "other.json"
    cfg2.write_text(json.dumps(other))
    assert main(["run", "--config", str(cfg2), "--output-dir", str(out)]) == 1
    assert "observations" in capsys.readouterr().err
    # A different chain seed on the same data is fine; summarizing it with the old seed is not.
    _pipeline(out, cfg, "run", seed=5)
    assert main(["summarize", "--config", str(cfg), "--output-dir", str(out)]) == 1
    assert "chain" in capsys.readouterr().err


def test_osse_study_table(tmp_path):
    cfg = _config(tmp_path)
    out = tmp_path / "study"
    _pipeline(out, cfg, "osse-study")
    rows = fio.read_table(out / "scores.csv")
    assert len(rows) == 8
    for rep in ("0", "1"):
        assert len([r for r in rows if r["replicate"] == rep]) == 4
    summary = fio.read_table(out / "scores_summary.csv")
    assert len(summary) == 4
    assert sum(float(r["best_rmse_share"]) for r in summary) == pytest.approx(1.0)


def test_missing_inputs_reported(tmp_path, capsys):
    assert main(["run", "--output-dir", str(tmp_path)]) == 1
    assert "does not exist" in capsys.readouterr().err
