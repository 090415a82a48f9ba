"""Backend selection for the tridiagonal kernels.

The compiled extension is used when importable; set ``FLUXGIBBS_PURE_PYTHON=1``
to force the numpy/scipy fallback. ``BACKEND`` names the active one.
"""
import os

from . import _kernels_py

if os.environ.get("FLUXGIBBS_PURE_PYTHON", "") not in ("", "0"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = "compiled" if _impl is not _kernels_py else "python"

correlation_precision = _impl.correlation_precision
tridiag_cholesky = _impl.tridiag_cholesky
tridiag_solve = _impl.tridiag_solve
tridiag_back_solve = _impl.tridiag_back_solve
tridiag_matvec = _impl.tridiag_matvec
markov_solve = _impl.markov_solve
markov_quad_logdet = _impl.markov_quad_logdet

__all__ = [
    "BACKEND",
    "correlation_precision",
    "tridiag_cholesky",
    "tridiag_solve",
    "tridiag_back_solve",
    "tridiag_matvec",
    "markov_solve",
    "markov_quad_logdet",
]
