import importlib

import numpy as np
import pytest

from fluxgibbs import _kernels_py

try:
    _compiled = importlib.import_module("fluxgibbs._kernels")
except ImportError:  # extension not built
    _compiled = None

BACKENDS = [pytest.param(_kernels_py, id="python")]
if _compiled is not None:
    BACKENDS.append(pytest.param(_compiled, id="compiled"))


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def dense_exp_cov(times, ell_minutes, sd):
    lag = np.abs(times[:, None] - times[None, :]) / (60.0 * ell_minutes)
    return np.outer(sd, sd) * np.exp(-lag)


def random_times(rng, n, lo=1.0, hi=120.0):
    return np.cumsum(rng.uniform(lo, hi, n))


@pytest.fixture(scope="session")
def small_surrogate():
    """A few-second surrogate: 12x6 grid, 3 periods, ~50 soundings per group."""
    from fluxgibbs.transport import SurrogateGrid, build_surrogate

    return build_surrogate(
        grid=SurrogateGrid(n_lon=12, n_lat=6), r_t=3, period_steps=20, n_levels=4,
        basis_kwargs=dict(lon_blocks=2, lat_blocks=2, ocean_lon_blocks=(1,)),
        track_kwargs=dict(pass_interval_steps=3, soundings_per_pass=5, precession_cells=5,
                          holdout_sites=((2, 3),), holdout_every_steps=4),
    )


def fake_chain(alpha, group_ids=("G",), beta=None, beta_sizes=None):
    """ChainOutput carrying given alpha samples and inert nuisance traces."""
    from fluxgibbs.sampler import ChainOutput

    alpha = np.atleast_2d(np.asarray(alpha, dtype=np.float64))
    n = alpha.shape[0]
    ng = len(group_ids)
    beta_sizes = beta_sizes or (0,) * ng
    beta = np.zeros((n, sum(beta_sizes))) if beta is None else np.asarray(beta, dtype=np.float64)
    return ChainOutput(
        alpha=alpha, beta=beta, beta_sizes=tuple(beta_sizes),
        kappa=np.zeros((n, 1)), tau_w=np.ones((n, 1)),
        gamma=np.ones((n, ng)), rho=np.zeros((n, ng)), tau_xi=np.full((n, ng), np.nan),
        ell=np.ones((n, ng)), group_ids=tuple(group_ids), error_cases=("ii",) * ng, seed=0,
    )


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE[number] = (bool(passed), detail)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
