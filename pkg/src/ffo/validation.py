"""Input validation helpers.

Thin wrappers around :func:`sklearn.utils.check_array` that pin dtype to
float64 and raise :class:`~ffo.exceptions.DimensionMismatch` on shape errors,
so every public entry point rejects malformed input the same way.
"""

import numpy as np
from sklearn.utils import check_array

from .exceptions import DimensionMismatch


def as_vector(v, size=None, name="vector"):
    """Return ``v`` as a finite 1-D float64 array, optionally of length ``size``."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name} must be 1-D, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise DimensionMismatch(f"{name} must have length {size}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_matrix(a, shape=None, name="matrix"):
    """Return ``a`` as a finite 2-D float64 array.

    ``shape`` entries may be ``None`` to leave that axis unchecked. Zero-row
    matrices are allowed (empty constraint blocks are common here), which is
    why ``ensure_min_samples`` is disabled.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1 and shape is not None and shape[0] == 0:
        arr = arr.reshape(0, shape[1] if shape[1] is not None else arr.shape[0])
    if arr.ndim != 2:
        raise DimensionMismatch(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size:
        arr = check_array(arr, dtype=np.float64, ensure_min_samples=0,
                          ensure_min_features=0, input_name=name)
    if shape is not None:
        for axis, want in enumerate(shape):
            if want is not None and arr.shape[axis] != want:
                raise DimensionMismatch(
                    f"{name} must have shape {shape}, got {arr.shape}")
    return arr


def check_symmetric(a, name="matrix", tol=1e-10):
    a = as_matrix(a, name=name)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > tol * scale:
        raise ValueError(f"{name} is not symmetric")
    return a
