"""Simulator hot kernels: compiled Cython when built, numpy otherwise.

Set ``DEEPBOED_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _fallback as fallback

compiled = None
if os.environ.get("DEEPBOED_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:
        compiled = None

_impl = compiled if compiled is not None else fallback
BACKEND = "cython" if compiled is not None else "numpy"

tridiag_columns = _impl.tridiag_columns
sym_eigh = _impl.sym_eigh

__all__ = ["BACKEND", "compiled", "fallback", "sym_eigh", "tridiag_columns"]
