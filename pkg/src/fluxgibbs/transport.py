"""Toy linear transport on a periodic lat-lon grid.

Stands in for a chemical transport model at desk scale: explicit upwind
advection by a uniform zonal wind, five-point diffusion and a surface flux
source. The scheme is linear in the initial field and the fluxes, so the
response to a flux basis function can be computed by running the basis
alone from a zero initial field.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .model import LAND, OCEAN, BasisLibrary
from .obsop import RetrievalKernel, apply_to_basis, column_average

PPM_PER_PGC = 0.471  # global-mean mole-fraction change per PgC of carbon


@dataclass(frozen=True)
class SurrogateGrid:
    """Grid, wind, diffusion and step length.

    ``wind`` is in cells per step, ``diffusion`` in cells² per step and
    ``dt`` in steps (1 step = ``step_seconds``). ``conversion`` turns a
    per-cell flux in PgC per step into ppm in that cell; by default it
    spreads ``PPM_PER_PGC`` over one cell's share of the globe.
    """

    n_lon: int = 36
    n_lat: int = 18
    wind: float = 0.5
    diffusion: float = 0.1
    dt: float = 1.0
    step_seconds: float = 3600.0
    conversion: Optional[float] = None

    def __post_init__(self):
        if self.n_lon < 3 or self.n_lat < 3:
            raise ValueError("grid needs at least 3 cells per dimension")
        if abs(self.wind) * self.dt > 1.0:
            raise ValueError(f"advection unstable: |u| dt = {abs(self.wind) * self.dt} > 1")
        if self.diffusion < 0 or self.diffusion * self.dt > 0.25:
            raise ValueError(f"diffusion unstable: D dt = {self.diffusion * self.dt} > 1/4")
        # the two bounds only hold jointly when the checkerboard mode is damped
        combined = (abs(self.wind) + 4.0 * self.diffusion) * self.dt
        if combined > 1.0:
            raise ValueError(f"scheme unstable: (|u| + 4 D) dt = {combined} > 1")
        if not self.step_seconds > 0:
            raise ValueError("step_seconds must be positive")
        if self.conversion is None:
            object.__setattr__(self, "conversion", PPM_PER_PGC * self.n_cells)

    @property
    def n_cells(self) -> int:
        return self.n_lon * self.n_lat

    @property
    def shape(self) -> tuple:
        return (self.n_lat, self.n_lon)

    def step(self, c: np.ndarray, flux: np.ndarray) -> np.ndarray:
        """Advance the field one step. Trailing axes are ``(lat, lon)``."""
        cu = self.wind * self.dt
        if cu >= 0:
            adv = -cu * (c - np.roll(c, 1, axis=-1))
        else:
            adv = cu * (c - np.roll(c, -1, axis=-1))
        lap = (np.roll(c, 1, axis=-1) + np.roll(c, -1, axis=-1)
               + np.roll(c, 1, axis=-2) + np.roll(c, -1, axis=-2) - 4.0 * c)
        return c + adv + self.diffusion * self.dt * lap + self.conversion * self.dt * flux


def _integrate(grid: SurrogateGrid, flux_at: Callable, initial, n_steps: int,
               on_step: Optional[Callable] = None):
    c = np.array(initial, dtype=np.float64)
    if c.shape[-2:] != grid.shape:
        raise ValueError(f"field must end in shape {grid.shape}, got {c.shape}")
    if on_step is not None:
        on_step(0, c)
    for n in range(n_steps):
        c = grid.step(c, flux_at(n))
        if on_step is not None:
            on_step(n + 1, c)
    return c


def run_transport(grid: SurrogateGrid, flux_series, initial_field) -> np.ndarray:
    """Integrate a flux series; returns the field at steps ``0..T``.

    ``flux_series`` has shape ``(T, ..., n_lat, n_lon)`` in PgC per cell per
    step; leading batch axes are carried through.
    """
    flux_series = np.asarray(flux_series, dtype=np.float64)
    initial_field = np.broadcast_to(np.asarray(initial_field, dtype=np.float64),
                                    flux_series.shape[1:])
    out = np.empty((flux_series.shape[0] + 1,) + flux_series.shape[1:])

    def keep(n, c):
        out[n] = c

    _integrate(grid, lambda n: flux_series[n], initial_field, flux_series.shape[0], keep)
    return out


# ------------------------------------------------------------------ basis


@dataclass(frozen=True)
class FluxBasisSpec:
    """Region-period basis built from a prior flux series.

    Basis function ``(j, k)`` is the prior flux restricted to region ``j``
    and period ``k``. ``prior_flux`` has shape ``(r_t * period_steps, n_lat,
    n_lon)`` in PgC per cell per step.
    """

    region_map: np.ndarray
    region_type: tuple
    r_t: int
    period_steps: int
    prior_flux: np.ndarray

    def __post_init__(self):
        rmap = np.asarray(self.region_map)
        if rmap.ndim != 2:
            raise ValueError("region map must be 2-D")
        r_s = len(self.region_type)
        if set(np.unique(rmap)) != set(range(r_s)):
            raise ValueError("region map must use every region index 0..r_s-1")
        flux = np.asarray(self.prior_flux, dtype=np.float64)
        if flux.shape != (self.n_steps,) + rmap.shape:
            raise ValueError(f"prior flux must have shape {(self.n_steps,) + rmap.shape}")
        object.__setattr__(self, "region_map", rmap)
        object.__setattr__(self, "prior_flux", flux)

    @property
    def r_s(self) -> int:
        return len(self.region_type)

    @property
    def r(self) -> int:
        return self.r_s * self.r_t

    @property
    def n_steps(self) -> int:
        return self.r_t * self.period_steps

    def masks(self) -> np.ndarray:
        return np.stack([(self.region_map == j).astype(np.float64) for j in range(self.r_s)])

    def flux_integrals(self, dt: float = 1.0) -> np.ndarray:
        """Integral of each basis function over its support (PgC)."""
        per_step = np.einsum("tyx,jyx->tj", self.prior_flux, self.masks()) * dt
        per_period = per_step.reshape(self.r_t, self.period_steps, self.r_s).sum(axis=1)
        return per_period.T.reshape(-1)

    def basis_flux(self, n: int) -> np.ndarray:
        """All ``r`` basis fluxes at step ``n``, shape ``(r, n_lat, n_lon)``."""
        out = np.zeros((self.r,) + self.region_map.shape)
        k = n // self.period_steps
        out[k::self.r_t] = self.masks() * self.prior_flux[n]
        return out


def default_basis_spec(grid: SurrogateGrid, r_t: int = 6, period_steps: int = 240,
                       lon_blocks: int = 4, lat_blocks: int = 2,
                       ocean_lon_blocks: Sequence[int] = (3,), land_scale: float = 8.0,
                       ocean_scale: float = 3.0) -> FluxBasisSpec:
    """Regions as longitude x latitude blocks with a seasonal prior flux.

    Each region's flux integrates to roughly ``land_scale`` (or
    ``ocean_scale``) PgC per period, with a smooth spatial bump and a
    seasonal cycle whose sign is fixed per region so no basis integrates to
    zero.
    """
    lat = np.arange(grid.n_lat)
    lon = np.arange(grid.n_lon)
    lat_block = np.minimum(lat * lat_blocks // grid.n_lat, lat_blocks - 1)
    lon_block = np.minimum(lon * lon_blocks // grid.n_lon, lon_blocks - 1)
    region_map = lat_block[:, None] * lon_blocks + lon_block[None, :]
    r_s = lon_blocks * lat_blocks
    region_type = tuple(
        OCEAN if (j % lon_blocks) in ocean_lon_blocks else LAND for j in range(r_s)
    )
    # smooth bump inside each region, normalized to unit sum per region
    yy, xx = np.meshgrid(lat, lon, indexing="ij")
    bump = np.zeros(grid.shape)
    for j in range(r_s):
        mask = region_map == j
        cy, cx = yy[mask].mean(), xx[mask].mean()
        sy, sx = max(np.ptp(yy[mask]), 1) / 2.0, max(np.ptp(xx[mask]), 1) / 2.0
        b = np.exp(-0.5 * (((yy - cy) / sy) ** 2 + ((xx - cx) / sx) ** 2)) * mask
        bump += b / b.sum()
    n_steps = r_t * period_steps
    phase = 2.0 * np.pi * np.arange(n_steps) / n_steps
    flux = np.empty((n_steps,) + grid.shape)
    for j in range(r_s):
        mask = region_map == j
        if region_type[j] == LAND:
            sign = 1.0 if j % 2 == 0 else -1.0
            amp = land_scale * sign * (1.0 + 0.5 * np.sin(phase + 0.7 * j))
        else:
            amp = -ocean_scale * (1.0 + 0.3 * np.cos(phase + 0.4 * j))
        flux[:, mask] = (amp[:, None] * bump[mask][None, :]) / (period_steps * grid.dt)
    return FluxBasisSpec(region_map, region_type, r_t, period_steps, flux)


# ------------------------------------------------------------------ track


@dataclass(frozen=True)
class TrackSpec:
    """Observation times (seconds), grid cells and group membership.

    Rows are sorted by time; ``group`` indexes ``group_ids``.
    """

    times: np.ndarray
    ilat: np.ndarray
    ilon: np.ndarray
    group: np.ndarray
    group_ids: tuple
    roles: tuple = ()

    def __post_init__(self):
        n = np.shape(self.times)[0]
        for name in ("ilat", "ilon", "group"):
            if np.shape(getattr(self, name)) != (n,):
                raise ValueError(f"{name} must have one entry per observation")
        roles = self.roles or ("training",) * len(self.group_ids)
        object.__setattr__(self, "roles", tuple(roles))
        for g in range(len(self.group_ids)):
            t = np.asarray(self.times)[np.asarray(self.group) == g]
            if np.any(np.diff(t) <= 0):
                raise ValueError(f"times within group {self.group_ids[g]!r} must increase")

    @property
    def m(self) -> int:
        return int(np.shape(self.times)[0])

    def rows(self, g: int) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.group) == g)


def make_track(grid: SurrogateGrid, n_steps: int, pass_interval_steps: int = 7,
               soundings_per_pass: int = 25, sounding_spacing_s: float = 10.0,
               precession_cells: int = 11, group_ids=("LG", "LN"),
               holdout_sites: Sequence[tuple] = ((4, 5), (13, 23)),
               holdout_every_steps: int = 12) -> TrackSpec:
    """Deterministic sun-synchronous-like sweep plus optional fixed sites.

    A pass starts every ``pass_interval_steps`` steps and sweeps the full
    latitude range at a fixed longitude, which precesses by
    ``precession_cells`` per pass. Passes alternate between the training
    groups. Each fixed site contributes one holdout observation every
    ``holdout_every_steps`` steps, as its own group.
    """
    rows = []
    n_train = len(group_ids)
    step_s = grid.step_seconds
    for p, start in enumerate(range(1, n_steps, pass_interval_steps)):
        t0 = start * step_s + 60.0
        if t0 + soundings_per_pass * sounding_spacing_s >= (start + 1) * step_s:
            raise ValueError("a pass must fit inside one step")
        lon = (p * precession_cells) % grid.n_lon
        lats = np.linspace(0, grid.n_lat - 1, soundings_per_pass).round().astype(int)
        if p % 2:
            lats = lats[::-1]
        for i, la in enumerate(lats):
            rows.append((t0 + i * sounding_spacing_s, la, lon, p % n_train))
    ids = list(group_ids)
    roles = ["training"] * n_train
    for s, (la, lo) in enumerate(holdout_sites):
        ids.append(f"site{s + 1}")
        roles.append("holdout")
        for start in range(holdout_every_steps // 2, n_steps, holdout_every_steps):
            rows.append((start * step_s + 30.0 * (s + 1), la, lo, n_train + s))
    rows.sort(key=lambda row: (row[0], row[3]))
    arr = np.array(rows, dtype=np.float64)
    return TrackSpec(
        times=arr[:, 0],
        ilat=arr[:, 1].astype(int),
        ilon=arr[:, 2].astype(int),
        group=arr[:, 3].astype(int),
        group_ids=tuple(ids),
        roles=tuple(roles),
    )


def default_kernels(track: TrackSpec, prior_value: float, n_levels: int = 20):
    """Uniform weights and unit averaging kernels for every observation."""
    kernel = RetrievalKernel.uniform(n_levels, prior_value)
    return [kernel] * track.m


# ------------------------------------------------------------------ responses


def _sample_steps(grid: SurrogateGrid, track: TrackSpec, n_steps: int) -> np.ndarray:
    steps = np.floor(np.asarray(track.times) / grid.step_seconds).astype(int)
    if np.any(steps < 0) or np.any(steps > n_steps):
        bad = int(np.argmax((steps < 0) | (steps > n_steps)))
        raise ValueError(
            f"track time {track.times[bad]} s lies outside the simulated horizon "
            f"of {n_steps * grid.step_seconds} s"
        )
    return steps


def _sampler(track: TrackSpec, steps: np.ndarray, out: np.ndarray):
    by_step = {}
    for i, n in enumerate(steps):
        by_step.setdefault(int(n), []).append(i)
    by_step = {n: np.array(ix) for n, ix in by_step.items()}
    ilat = np.asarray(track.ilat)
    ilon = np.asarray(track.ilon)

    def on_step(n, c):
        ix = by_step.get(n)
        if ix is not None:
            out[ix] = np.moveaxis(c[..., ilat[ix], ilon[ix]], -1, 0)

    return on_step


def sample_along_track(grid: SurrogateGrid, flux_at: Callable, initial, n_steps: int,
                       track: TrackSpec) -> np.ndarray:
    """Surface values at every track point, shape ``(m, *batch)``."""
    initial = np.asarray(initial, dtype=np.float64)
    steps = _sample_steps(grid, track, n_steps)
    out = np.empty((track.m,) + initial.shape[:-2])
    _integrate(grid, flux_at, initial, n_steps, _sampler(track, steps, out))
    return out


def make_response_functions(grid: SurrogateGrid, spec: FluxBasisSpec, track: TrackSpec,
                            kernels: Sequence[RetrievalKernel], background: float = 400.0):
    """Response matrix (``m x r``) and prior-mean vector along the track.

    All basis runs are carried in one batched integration from a zero field;
    the prior-mean run starts from a uniform ``background`` field. Surface
    values become pseudo-profiles replicated over the kernel's levels.
    """
    if len(kernels) != track.m:
        raise ValueError("one retrieval kernel per observation required")
    surface = sample_along_track(
        grid, spec.basis_flux, np.zeros((spec.r,) + grid.shape), spec.n_steps, track
    )
    prior_surface = sample_along_track(
        grid, lambda n: spec.prior_flux[n], np.full(grid.shape, background), spec.n_steps, track
    )
    response = np.empty((track.m, spec.r))
    z0 = np.empty(track.m)
    for i, kernel in enumerate(kernels):
        ones = np.ones((kernel.n_levels, 1))
        response[i] = apply_to_basis(kernel, ones * surface[i][None, :])
        z0[i] = column_average(kernel, np.full(kernel.n_levels, prior_surface[i]))
    return response, z0


@dataclass
class SurrogateDataset:
    """Everything the surrogate produces for one configuration."""

    grid: SurrogateGrid
    spec: FluxBasisSpec
    track: TrackSpec
    kernels: list
    basis: BasisLibrary
    prior_mean: np.ndarray
    meta: dict = field(default_factory=dict)


def build_surrogate(grid: Optional[SurrogateGrid] = None, r_t: int = 6,
                    period_steps: int = 240, n_levels: int = 20, background: float = 400.0,
                    basis_kwargs: Optional[dict] = None,
                    track_kwargs: Optional[dict] = None) -> SurrogateDataset:
    """Build grid, basis, track, kernels and responses with the desk-scale defaults."""
    grid = grid or SurrogateGrid()
    spec = default_basis_spec(grid, r_t=r_t, period_steps=period_steps, **(basis_kwargs or {}))
    track = make_track(grid, spec.n_steps, **(track_kwargs or {}))
    kernels = default_kernels(track, background, n_levels)
    response, z0 = make_response_functions(grid, spec, track, kernels, background)
    integrals = spec.flux_integrals(grid.dt)
    basis = BasisLibrary(
        r_s=spec.r_s,
        r_t=spec.r_t,
        response_matrix=response,
        flux_integrals=integrals,
        prior_flux_integrals=integrals.copy(),
        region_type=spec.region_type,
    )
    return SurrogateDataset(grid, spec, track, kernels, basis, z0)
