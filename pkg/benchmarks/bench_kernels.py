"""Time the compiled kernels against the pure-Python fallback.

Usage: python benchmarks/bench_kernels.py [--sizes 200 2575 20000] [--repeat 5]

Both backends are imported directly, so the choice made at package import
does not matter. Outputs are checked for agreement before timing.
"""
import argparse
import importlib
import timeit

import numpy as np

from fluxgibbs import _kernels_py


def cases(m, rng):
    times = np.cumsum(rng.uniform(5.0, 120.0, m))
    sigma = np.sqrt(rng.uniform(0.2, 1.5, m))
    dvar = rng.uniform(0.1, 0.8, m)
    resid = rng.normal(size=m)
    rhs = rng.normal(size=(m, 8))
    diag = 4.0 + rng.uniform(size=m)
    sub = rng.uniform(-1.0, 1.0, m - 1)
    return {
        "correlation_precision": lambda k: k.correlation_precision(times, 1.3),
        "tridiag_cholesky": lambda k: k.tridiag_cholesky(diag, sub),
        "markov_quad_logdet": lambda k: k.markov_quad_logdet(times, 1.3, sigma, dvar, resid),
        "markov_solve (8 rhs)": lambda k: k.markov_solve(times, 1.3, sigma, dvar, rhs),
    }


def _flat(out):
    parts = out if isinstance(out, tuple) else (out,)
    return np.concatenate([np.ravel(np.asarray(p, dtype=np.float64)) for p in parts])


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sizes", type=int, nargs="+", default=[200, 2575, 20000])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    try:
        compiled = importlib.import_module("fluxgibbs._kernels")
    except ImportError:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':24s} {'m':>7s} {'python us':>11s} {'compiled us':>12s} {'speed-up':>9s}")
    for m in args.sizes:
        for name, call in cases(m, rng).items():
            np.testing.assert_allclose(_flat(call(compiled)), _flat(call(_kernels_py)),
                                       rtol=1e-9, atol=1e-12)
            timings = {}
            for label, mod in (("python", _kernels_py), ("compiled", compiled)):
                timer = timeit.Timer(lambda: call(mod))
                number, _ = timer.autorange()
                timings[label] = min(timer.repeat(args.repeat, number)) / number * 1e6
            print(f"{name:24s} {m:7d} {timings['python']:11.1f} {timings['compiled']:12.1f} "
                  f"{timings['python'] / timings['compiled']:8.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
