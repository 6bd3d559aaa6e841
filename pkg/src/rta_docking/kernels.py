"""Backend selection for the hot kernels.

The compiled extension is used when importable. Set ``RTA_DOCKING_PURE_PYTHON=1``
to force the pure-Python fallback.
"""
from __future__ import annotations

import os

from rta_docking import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if not os.environ.get("RTA_DOCKING_PURE_PYTHON"):
    try:
        from rta_docking import _kernels as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        _impl = _compiled

STATUS_OPTIMAL = _kernels_py.STATUS_OPTIMAL
STATUS_INFEASIBLE = _kernels_py.STATUS_INFEASIBLE
STATUS_MAX_ITER = _kernels_py.STATUS_MAX_ITER


def get_backend(name: str | None = None):
    """Return the kernel module for ``name`` ("compiled", "python" or None for the active one)."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from rta_docking import _kernels
        return _kernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    try:
        from rta_docking import _kernels  # noqa: F401
    except ImportError:
        return names
    return ["compiled"] + names
