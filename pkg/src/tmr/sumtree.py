"""Backend selection for the sum tree / min tree kernels.

The compiled extension is used when it imports; otherwise, or when
``TMR_PURE_PYTHON=1`` is set, the pure-Python twin is used.
"""

import os

from . import _kernels_py

BACKEND = "python"

if os.environ.get("TMR_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _impl

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _kernels_py
else:
    _impl = _kernels_py

SumTree = _impl.SumTree
MinTree = _impl.MinTree

PySumTree = _kernels_py.SumTree
PyMinTree = _kernels_py.MinTree

__all__ = ["BACKEND", "SumTree", "MinTree", "PySumTree", "PyMinTree"]
