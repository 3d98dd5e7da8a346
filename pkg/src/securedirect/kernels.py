"""Kernel selection.

The compiled extension is used when importable; set
``SECUREDIRECT_PURE_PYTHON=1`` to force the pure-Python fallback.
``BACKEND`` names the implementation in use.
"""

from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("SECUREDIRECT_PURE_PYTHON"):
    _impl = _pykernels
else:
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "cython"

ones_complement_sum = _impl.ones_complement_sum
fnv1a64 = _impl.fnv1a64
dfa_scan = _impl.dfa_scan

__all__ = ["BACKEND", "ones_complement_sum", "fnv1a64", "dfa_scan"]
