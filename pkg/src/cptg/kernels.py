"""Kernel backend selection.

The compiled extension is used when importable; set ``CPTG_PURE_PYTHON=1``
to force the numpy fallback.
"""
from __future__ import annotations

import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("CPTG_PURE_PYTHON") != "1":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pykernels


def zinb_terms(y, eta_z, eta_x, log_alpha):
    return _impl.zinb_terms(y, eta_z, eta_x, float(log_alpha))


def ranksum_counts(scores, k):
    return _impl.ranksum_counts(scores, k)


def backends() -> dict:
    """All importable backends by name, for cross-checks and benchmarks."""
    out = {"python": _pykernels}
    try:
        from . import _kernels

        out["cython"] = _kernels
    except ImportError:
        pass
    return out
