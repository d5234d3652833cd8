"""Kernel backend selection.

The compiled extension is used when it imports; set ``PTRAG_PURE_PYTHON=1`` to
force the numpy fallback.
"""

import os

from . import _kernels_py as python_backend

compiled_backend = None
if os.environ.get("PTRAG_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled_backend
    except ImportError:
        compiled_backend = None

_active = compiled_backend or python_backend
BACKEND = "compiled" if compiled_backend is not None else "python"

linear_assignment = _active.linear_assignment
mwu_null_counts = _active.mwu_null_counts

__all__ = ["BACKEND", "linear_assignment", "mwu_null_counts", "python_backend", "compiled_backend"]
