"""Column-averaging observation operator for satellite retrievals."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class RetrievalKernel:
    """Quadrature weights, averaging-kernel vector and retrieval prior profile."""

    weights: np.ndarray
    averaging_kernel: np.ndarray
    prior_profile: np.ndarray
    prior_column: Optional[float] = None

    def __post_init__(self):
        c = np.asarray(self.weights, dtype=np.float64)
        a = np.asarray(self.averaging_kernel, dtype=np.float64)
        y0 = np.asarray(self.prior_profile, dtype=np.float64)
        if c.ndim != 1 or a.shape != c.shape or y0.shape != c.shape:
            raise ValueError("weights, averaging kernel and prior profile must share one length")
        if abs(c.sum() - 1.0) > 1e-10:
            raise ValueError(f"quadrature weights sum to {c.sum()!r}, not 1")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(y0))):
            raise ValueError("kernel entries must be finite")
        col = float(c @ y0)
        if self.prior_column is None:
            object.__setattr__(self, "prior_column", col)
        elif abs(self.prior_column - col) > 1e-10 * max(1.0, abs(col)):
            raise ValueError("prior column is inconsistent with weights and prior profile")
        object.__setattr__(self, "weights", c)
        object.__setattr__(self, "averaging_kernel", a)
        object.__setattr__(self, "prior_profile", y0)

    @property
    def n_levels(self) -> int:
        return self.weights.shape[0]

    @property
    def effective_weights(self) -> np.ndarray:
        return self.weights * self.averaging_kernel

    @classmethod
    def uniform(cls, n_levels: int, prior_value: float):
        """Uniform weights, unit averaging kernel, flat prior profile."""
        return cls(
            np.full(n_levels, 1.0 / n_levels),
            np.ones(n_levels),
            np.full(n_levels, float(prior_value)),
        )


def column_average(kernel: RetrievalKernel, profile) -> float:
    profile = np.asarray(profile, dtype=np.float64)
    if profile.shape != (kernel.n_levels,):
        raise ValueError(
            f"profile has {profile.shape[0] if profile.ndim else 0} levels, "
            f"kernel has {kernel.n_levels}"
        )
    return kernel.prior_column + float(kernel.effective_weights @ (profile - kernel.prior_profile))


def apply_to_basis(kernel: RetrievalKernel, basis_profiles) -> np.ndarray:
    """Column-average response profiles (``n_levels x r``) into one row of the response matrix.

    Responses are perturbations, so only the averaging-kernel weighted sum
    applies; the retrieval prior enters the prior-mean column alone.
    """
    basis_profiles = np.asarray(basis_profiles, dtype=np.float64)
    if basis_profiles.ndim == 1:
        basis_profiles = basis_profiles[:, None]
    if basis_profiles.shape[0] != kernel.n_levels:
        raise ValueError(
            f"basis profiles have {basis_profiles.shape[0]} levels, kernel has {kernel.n_levels}"
        )
    return kernel.effective_weights @ basis_profiles
