"""Hot-kernel dispatch: compiled extension when available, numpy otherwise.

Set ``INVMM_PURE_PYTHON=1`` to force the numpy fallback (used by the
benchmark and by the cross-check tests).
"""
from __future__ import annotations

import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("INVMM_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"

mlp_forward = _impl.mlp_forward
mlp_backward = _impl.mlp_backward
mlp_apply = _impl.mlp_apply
ddim_loop = _impl.ddim_loop


def compiled_module():
    """The compiled kernel module, or None if it was not built."""
    try:
        from . import _kernels
    except ImportError:
        return None
    return _kernels
