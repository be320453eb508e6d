"""Spline kernel backend selection.

The compiled extension is used when available; set CAUSALFLOW_NO_EXT=1
to force the numpy fallback. Both backends implement the same three
functions with identical semantics (tests assert parity).
"""

import os

from . import rqs_np

numpy_impl = rqs_np
compiled_impl = None

if not os.environ.get("CAUSALFLOW_NO_EXT"):
    try:
        from . import _rqs as compiled_impl  # type: ignore[no-redef]
    except ImportError:
        compiled_impl = None

if compiled_impl is not None:
    BACKEND = "compiled"
    _impl = compiled_impl
else:
    BACKEND = "numpy"
    _impl = numpy_impl

rqs_forward = _impl.rqs_forward
rqs_backward = _impl.rqs_backward
rqs_inverse = _impl.rqs_inverse

__all__ = [
    "BACKEND",
    "compiled_impl",
    "numpy_impl",
    "rqs_backward",
    "rqs_forward",
    "rqs_inverse",
]
