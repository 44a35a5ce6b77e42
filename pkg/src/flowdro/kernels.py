"""Backend selection for the hot combinatorial kernels.

The compiled extension is used when it imports; otherwise (or when the
environment variable ``FLOWDRO_PURE_PYTHON=1`` is set) the numpy fallback
is used. ``BACKEND`` names the active one.
"""

import os

from . import _kernels_py

try:
    if os.environ.get("FLOWDRO_PURE_PYTHON") == "1":
        raise ImportError("pure-Python backend forced")
    from . import _kernels as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"

linear_assignment = _impl.linear_assignment
simplex_iterate = _impl.simplex_iterate

__all__ = ["BACKEND", "linear_assignment", "simplex_iterate", "get_backend"]


def get_backend(name=None):
    """Return the kernel module for ``name`` ("compiled" or "python"), default active."""
    if name is None:
        return _impl
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from . import _kernels

        return _kernels
    raise ValueError(f"unknown backend {name!r}")
