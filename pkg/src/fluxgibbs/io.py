"""File formats: response matrices, observations, kernels, chains, manifests.

Text files start with a ``# config_hash=<hex>`` line so artifacts produced
under different configurations can be told apart. Floats are written with
``repr`` so a write/read cycle is exact.
"""
from __future__ import annotations

import csv
import hashlib
import json
import platform
import struct
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigMismatchError
from .model import CASE_I, CASE_II, BasisLibrary, ObservationGroup, standardize_covariates
from .obsop import RetrievalKernel
from .sampler import ChainOutput

MAGIC = b"FLXRSP1"
HASH_PREFIX = "# config_hash="
OBS_FIXED = ["group", "time_unix_s", "value_ppm", "variance_ppm2", "z0_ppm"]


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form, first 16 hex digits."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _fmt(x) -> str:
    x = float(x)
    return "nan" if x != x else repr(x)


# ------------------------------------------------------------------ binary matrices


def write_matrix(path, matrix) -> None:
    """``FLXRSP1`` layout: magic, little-endian u64 rows and columns, row-major f8."""
    a = np.ascontiguousarray(matrix, dtype="<f8")
    if a.ndim != 2:
        raise ValueError("matrix must be 2-D")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", a.shape[0], a.shape[1]))
        fh.write(a.tobytes(order="C"))


def read_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        header = fh.read(16)
        if len(header) != 16:
            raise ValueError(f"{path}: truncated header")
        m, r = struct.unpack("<QQ", header)
        data = fh.read()
    if len(data) != 8 * m * r:
        raise ValueError(f"{path}: expected {8 * m * r} data bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8").reshape(m, r).astype(np.float64)


# ------------------------------------------------------------------ hashed text files


def _open_hashed(path, hash_value: str, mode="w"):
    fh = open(path, mode, newline="")
    fh.write(f"{HASH_PREFIX}{hash_value}\n")
    return fh


def read_hash(path) -> Optional[str]:
    """Config hash recorded in a text artifact, or ``None`` if absent."""
    with open(path, newline="") as fh:
        first = fh.readline().strip()
    return first[len(HASH_PREFIX):] if first.startswith(HASH_PREFIX) else None


def _rows(path):
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.reader(lines))


def check_hashes(hashes: dict, expected: Optional[str] = None) -> Optional[str]:
    """Refuse artifacts whose recorded hashes disagree.

    ``hashes`` maps a description to a hash (``None`` for unhashed external
    files, which are accepted). Returns the common hash.
    """
    known = {k: v for k, v in hashes.items() if v is not None}
    if expected is not None:
        known = {**known, "expected": expected}
    if len(set(known.values())) > 1:
        detail = ", ".join(f"{k}={v}" for k, v in sorted(known.items()))
        raise ConfigMismatchError(f"artifacts come from different configurations: {detail}")
    return next(iter(known.values()), None)


# ------------------------------------------------------------------ basis


def write_basis(directory, basis: BasisLibrary, hash_value: str,
                response_name: str = "response.bin") -> Path:
    directory = Path(directory)
    write_matrix(directory / response_name, basis.response_matrix)
    meta = {
        "config_hash": hash_value,
        "r_s": basis.r_s,
        "r_t": basis.r_t,
        "region_type": list(basis.region_type),
        "flux_integrals": [float(x) for x in basis.flux_integrals],
        "prior_flux_integrals": [float(x) for x in basis.prior_flux_integrals],
        "response_file": response_name,
        "ordering": "region-major, period-minor",
        "units": {"response": "ppm per unit scaling", "flux_integrals": "PgC per period"},
    }
    path = directory / "basis.json"
    path.write_text(json.dumps(meta, indent=1) + "\n")
    return path


def read_basis(path):
    """Returns ``(basis, config_hash)``."""
    path = Path(path)
    meta = json.loads(path.read_text())
    for key in ("r_s", "r_t", "region_type", "flux_integrals", "prior_flux_integrals",
                "response_file"):
        if key not in meta:
            raise ValueError(f"{path}: missing key {key!r}")
    resp = read_matrix(path.parent / meta["response_file"])
    basis = BasisLibrary(
        r_s=int(meta["r_s"]),
        r_t=int(meta["r_t"]),
        response_matrix=resp,
        flux_integrals=np.array(meta["flux_integrals"], dtype=np.float64),
        prior_flux_integrals=np.array(meta["prior_flux_integrals"], dtype=np.float64),
        region_type=tuple(meta["region_type"]),
    )
    return basis, meta.get("config_hash")


# ------------------------------------------------------------------ observations


def write_observations(path, groups: Sequence[ObservationGroup], hash_value: str,
                       raw_covariates: Optional[Sequence[np.ndarray]] = None,
                       line_order: Optional[Sequence[tuple]] = None) -> None:
    """Write observations, one line per ``(group index, row)`` in ``line_order``.

    The default order is group by group. Lines must follow the rows of the
    response matrix they will be read with. Covariates are written in raw
    units (``standardized * scale`` unless ``raw_covariates`` is given); the
    reader re-standardizes them.
    """
    if line_order is None:
        line_order = [(gi, i) for gi, g in enumerate(groups) for i in range(g.m)]
    p_max = max((g.p for g in groups), default=0)
    header = OBS_FIXED + [f"cov_{k + 1}" for k in range(p_max)] + ["role"]
    with _open_hashed(path, hash_value) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        raws = [raw_covariates[gi] if raw_covariates is not None
                else g.covariates * g.covariate_scale[None, :] for gi, g in enumerate(groups)]
        for gi, i in line_order:
            g = groups[gi]
            covs = [_fmt(v) for v in raws[gi][i]] + [""] * (p_max - g.p)
            w.writerow([g.group_id, _fmt(g.times[i]), _fmt(g.values[i]),
                        _fmt(g.variances[i]), _fmt(g.prior_mean[i])] + covs + [g.role])


def read_observations(path, response_matrix, error_cases=None, merge_duplicates=False):
    """Parse an observations file into time-sorted, standardized groups.

    ``response_matrix`` rows follow the file's data rows. ``error_cases`` maps
    group id to ``"i"`` or ``"ii"`` (default ``"ii"``). Returns
    ``(groups, config_hash)``.
    """
    from .model import merge_coincident

    rows = _rows(path)
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = rows[0]
    if header[:5] != OBS_FIXED or header[-1] != "role":
        raise ValueError(f"{path}: header must start with {','.join(OBS_FIXED)} and end with role")
    cov_cols = header[5:-1]
    for k, name in enumerate(cov_cols):
        if name != f"cov_{k + 1}":
            raise ValueError(f"{path}: column {6 + k} should be cov_{k + 1}, found {name!r}")
    data = rows[1:]
    response_matrix = np.asarray(response_matrix, dtype=np.float64)
    if response_matrix.shape[0] != len(data):
        raise ValueError(
            f"{path}: {len(data)} observations but the response matrix has "
            f"{response_matrix.shape[0]} rows"
        )
    order, parsed = [], {}
    for ln, row in enumerate(data, start=2):
        if len(row) != len(header):
            raise ValueError(f"{path}: line {ln} has {len(row)} fields, expected {len(header)}")
        gid = row[0]
        try:
            nums = [float(x) for x in row[1:5]]
            covs = [float(x) for x in row[5:-1] if x != ""]
        except ValueError as exc:
            raise ValueError(f"{path}: line {ln}: {exc}") from None
        if not nums[2] > 0:
            raise ValueError(f"{path}: line {ln} (group {gid!r}): variance must be positive")
        if not all(np.isfinite(nums)):
            raise ValueError(f"{path}: line {ln}: non-finite value")
        role = row[-1]
        if role not in ("training", "holdout"):
            raise ValueError(f"{path}: line {ln}: role must be training or holdout")
        if gid not in parsed:
            order.append(gid)
            parsed[gid] = {"rows": [], "nums": [], "covs": [], "role": role, "line": ln}
        entry = parsed[gid]
        if role != entry["role"]:
            raise ValueError(f"{path}: line {ln}: group {gid!r} mixes roles")
        if entry["covs"] and len(covs) != len(entry["covs"][0]):
            raise ValueError(f"{path}: line {ln}: group {gid!r} has inconsistent covariates")
        entry["rows"].append(ln - 2)
        entry["nums"].append(nums)
        entry["covs"].append(covs)
    error_cases = error_cases or {}
    groups = []
    for gid in order:
        e = parsed[gid]
        nums = np.array(e["nums"])
        idx = np.array(e["rows"])
        raw = np.array(e["covs"], dtype=np.float64).reshape(len(idx), -1)
        srt = np.argsort(nums[:, 0], kind="stable")
        nums, idx, raw = nums[srt], idx[srt], raw[srt]
        times = nums[:, 0]
        resp = response_matrix[idx]
        if merge_duplicates and np.any(np.diff(times) == 0):
            times, values, variances, z0, raw, resp = merge_coincident(
                times, nums[:, 1], nums[:, 2], nums[:, 3], raw, resp)
            nums = np.column_stack([times, values, variances, z0])
        elif np.any(np.diff(times) == 0):
            k = int(np.argmax(np.diff(times) == 0)) + 1
            raise ValueError(
                f"{path}: group {gid!r} has a duplicate timestamp at index {k} "
                f"(t = {times[k]!r}); merge coincident observations first"
            )
        if raw.shape[1]:
            try:
                cov, scale = standardize_covariates(raw)
            except ValueError as exc:
                raise ValueError(f"{path}: group {gid!r}: {exc}") from None
        else:
            cov, scale = raw, np.ones(0)
        case = error_cases.get(gid, CASE_II)
        if case not in (CASE_I, CASE_II):
            raise ValueError(f"group {gid!r}: error case must be 'i' or 'ii'")
        groups.append(ObservationGroup(
            group_id=gid, times=nums[:, 0], values=nums[:, 1], prior_mean=nums[:, 3],
            variances=nums[:, 2], covariates=cov, response_rows=resp, error_case=case,
            role=e["role"], covariate_scale=scale,
        ))
    return groups, read_hash(path)


# ------------------------------------------------------------------ kernels


def write_kernels(path, kernels: Sequence[RetrievalKernel], hash_value: str) -> None:
    n_max = max((k.n_levels for k in kernels), default=0)
    header = (["obs_index", "n_levels"] + [f"c_{i + 1}" for i in range(n_max)]
              + [f"a_{i + 1}" for i in range(n_max)] + [f"prior_{i + 1}" for i in range(n_max)])
    with _open_hashed(path, hash_value) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, k in enumerate(kernels):
            pad = [""] * (n_max - k.n_levels)
            w.writerow([i, k.n_levels] + [_fmt(v) for v in k.weights] + pad
                       + [_fmt(v) for v in k.averaging_kernel] + pad
                       + [_fmt(v) for v in k.prior_profile] + pad)


def read_kernels(path):
    rows = _rows(path)
    header = rows[0]
    if header[:2] != ["obs_index", "n_levels"]:
        raise ValueError(f"{path}: header must start with obs_index,n_levels")
    n_max = (len(header) - 2) // 3
    out = []
    for ln, row in enumerate(rows[1:], start=2):
        n = int(row[1])
        if int(row[0]) != ln - 2:
            raise ValueError(f"{path}: line {ln}: obs_index out of order")
        vals = row[2:]
        try:
            c = [float(x) for x in vals[:n]]
            a = [float(x) for x in vals[n_max:n_max + n]]
            y0 = [float(x) for x in vals[2 * n_max:2 * n_max + n]]
            out.append(RetrievalKernel(c, a, y0))
        except ValueError as exc:
            raise ValueError(f"{path}: line {ln}: {exc}") from None
    return out, read_hash(path)


# ------------------------------------------------------------------ chains


def _write_block(path, names, columns, hash_value, n=None):
    with _open_hashed(path, hash_value) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration"] + list(names))
        n = columns[0].shape[0] if n is None else n
        for i in range(n):
            w.writerow([i] + [_fmt(c[i]) for c in columns])


def write_chain(directory, chain: ChainOutput, hash_value: str, extra: Optional[dict] = None):
    """Persist a chain as CSV blocks plus a binary alpha matrix."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_matrix(d / "alpha.bin", chain.alpha)
    beta_names, beta_cols = [], []
    for g, gid in enumerate(chain.group_ids):
        for k in range(chain.beta_sizes[g]):
            beta_names.append(f"beta[{gid}][{k + 1}]")
            beta_cols.append(chain.beta_for(g)[:, k])
    _write_block(d / "beta.csv", beta_names, beta_cols, hash_value, n=len(chain))
    names, cols = [], []
    for j in range(chain.kappa.shape[1]):
        names += [f"kappa[{j}]", f"tau_w[{j}]"]
        cols += [chain.kappa[:, j], chain.tau_w[:, j]]
    _write_block(d / "hyper.csv", names, cols, hash_value)
    names, cols = [], []
    for g, gid in enumerate(chain.group_ids):
        for p in ("gamma", "rho", "tau_xi", "ell"):
            names.append(f"{p}[{gid}]")
            cols.append(getattr(chain, p)[:, g])
    _write_block(d / "errors.csv", names, cols, hash_value)
    meta = {
        "config_hash": hash_value,
        "chain_config_hash": chain.config_hash,
        "seed": chain.seed,
        "n_samples": len(chain),
        "group_ids": list(chain.group_ids),
        "error_cases": list(chain.error_cases),
        "beta_sizes": list(chain.beta_sizes),
        "counters": chain.counters,
    }
    if extra:
        meta.update(extra)
    (d / "chain.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")


def _read_block(path, n):
    rows = _rows(path)
    names = rows[0][1:]
    arr = np.array([[float(x) for x in r[1:]] for r in rows[1:]], dtype=np.float64)
    arr = arr.reshape(n, len(names))
    return names, arr


def read_chain(directory) -> tuple:
    """Load a persisted chain; returns ``(chain, meta)``.

    Refuses directories whose files carry different config hashes.
    """
    d = Path(directory)
    meta = json.loads((d / "chain.json").read_text())
    hashes = {"chain.json": meta.get("config_hash")}
    for name in ("beta.csv", "hyper.csv", "errors.csv"):
        hashes[name] = read_hash(d / name)
    check_hashes(hashes)
    alpha = read_matrix(d / "alpha.bin")
    n = alpha.shape[0]
    if n != meta["n_samples"]:
        raise ValueError(f"{d}: alpha has {n} rows, chain.json says {meta['n_samples']}")
    _, beta = _read_block(d / "beta.csv", n)
    _, hyper = _read_block(d / "hyper.csv", n)
    _, errs = _read_block(d / "errors.csv", n)
    n_groups = len(meta["group_ids"])
    errs = errs.reshape(n, n_groups, 4)
    chain = ChainOutput(
        alpha=alpha,
        beta=beta,
        beta_sizes=tuple(meta["beta_sizes"]),
        kappa=hyper[:, 0::2].copy(),
        tau_w=hyper[:, 1::2].copy(),
        gamma=errs[:, :, 0].copy(),
        rho=errs[:, :, 1].copy(),
        tau_xi=errs[:, :, 2].copy(),
        ell=errs[:, :, 3].copy(),
        group_ids=tuple(meta["group_ids"]),
        error_cases=tuple(meta["error_cases"]),
        seed=int(meta["seed"]),
        config_hash=meta.get("chain_config_hash", ""),
        counters=meta.get("counters", {}),
    )
    return chain, meta


# ------------------------------------------------------------------ generic tables


def write_table(path, rows: Sequence[dict], hash_value: str, columns=None) -> None:
    columns = columns or list(dict.fromkeys(k for r in rows for k in r))
    with _open_hashed(path, hash_value) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(r.get(c, "")) for c in columns])


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return _fmt(v)
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return v


def read_table(path) -> list:
    rows = _rows(path)
    return [dict(zip(rows[0], r)) for r in rows[1:]]


def write_manifest(directory, command: str, hash_value: str, files: Sequence[str],
                   extra: Optional[dict] = None) -> Path:
    import scipy

    from . import __version__
    from .kernels import BACKEND

    manifest = {
        "command": command,
        "config_hash": hash_value,
        "files": sorted(files),
        "versions": {
            "fluxgibbs": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "kernel_backend": BACKEND,
    }
    if extra:
        manifest.update(extra)
    path = Path(directory) / f"manifest-{command}.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path
