"""Process-wide numeric settings.

``DLAPLAN_NUMBA=0`` in the environment forces the pure-numpy kernels even
when numba is importable.
"""
import os

import numpy as np

_DTYPE = np.float64


def get_dtype():
    return _DTYPE


def set_dtype(dtype):
    """Switch the default float type (float64 or float32) for new arrays."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}; use float64 or float32")
    _DTYPE = dtype


def numba_requested():
    return os.environ.get("DLAPLAN_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off")
