"""Univariate slice sampling with stepping-out and shrinkage."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import SliceSamplingError


@dataclass
class SliceStats:
    calls: int = 0
    evaluations: int = 0
    retries: int = 0


def _step_out(log_density, x0, log_y, width, max_steps, rng, stats):
    left = x0 - width * rng.random()
    right = left + width
    for _ in range(max_steps):
        stats.evaluations += 1
        if not log_density(left) > log_y:
            break
        left -= width
    else:
        return left, right, False
    for _ in range(max_steps):
        stats.evaluations += 1
        if not log_density(right) > log_y:
            break
        right += width
    else:
        return left, right, False
    return left, right, True


def slice_sample(log_density, current, width=1.0, max_steps=50, rng=None,
                 log_current=None, stats=None):
    """One slice-sampling update of a scalar.

    The interval of initial size ``width`` is stepped out at most
    ``max_steps`` widths on each side, then shrunk towards ``current`` until a point
    inside the slice is found. If stepping out hits the limit with an end still
    inside the slice, the update is retried once with ``width * max_steps``;
    a second failure raises ``SliceSamplingError``. ``log_density`` may return
    ``-inf`` outside the support.

    Returns ``(new_value, log_density(new_value))``.
    """
    if stats is None:
        stats = SliceStats()
    stats.calls += 1
    if log_current is None:
        stats.evaluations += 1
        log_current = log_density(current)
    if not math.isfinite(log_current):
        raise SliceSamplingError(f"log density is not finite at the current point {current!r}")
    if not width > 0:
        raise SliceSamplingError("width must be positive")
    log_y = log_current + math.log(rng.random())

    for attempt in range(2):
        left, right, ok = _step_out(log_density, current, log_y, width, max_steps, rng, stats)
        if ok:
            break
        stats.retries += 1
        width *= max_steps
    else:
        raise SliceSamplingError(
            f"stepping out exceeded {max_steps} steps twice from {current!r}"
        )

    tiny = 1e-12 * (1.0 + abs(current))
    while True:
        x1 = left + (right - left) * rng.random()
        stats.evaluations += 1
        lp = log_density(x1)
        if lp > log_y:
            return x1, lp
        if x1 < current:
            left = x1
        else:
            right = x1
        if right - left < tiny:
            raise SliceSamplingError(f"interval shrank to the current point {current!r}")
