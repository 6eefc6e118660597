"""Selects the compiled box kernels when available, else the pure-Python ones."""
import os

BACKEND = "python"

if os.environ.get("SSIOD_PURE_PYTHON", "") not in ("", "0"):
    from . import _kernels_py as kernels
else:
    try:
        from . import _kernels as kernels

        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as kernels

__all__ = ["kernels", "BACKEND"]
