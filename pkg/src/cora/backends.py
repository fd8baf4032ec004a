"""Kernel backend selection.

Set CORA_BACKEND=numpy to force the pure-numpy kernels; default is the
numba-compiled ones, falling back to numpy when numba is unavailable.
"""
import os

_requested = os.environ.get("CORA_BACKEND", "numba").strip().lower()

if _requested == "numpy":
    from . import kernels_numpy as _k
elif _requested == "numba":
    try:
        from . import kernels_numba as _k
    except ImportError:
        from . import kernels_numpy as _k
else:
    raise ValueError(f"CORA_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

BACKEND = _k.BACKEND

im2col = _k.im2col
col2im = _k.col2im
maxpool_forward = _k.maxpool_forward
maxpool_backward = _k.maxpool_backward
avgpool_forward = _k.avgpool_forward
avgpool_backward = _k.avgpool_backward
