"""Small input-validation helpers used across the estimators."""

import numpy as np

from .errors import DimensionMismatch, NonFiniteInput


def as_float_array(x, name="array", ndim=None):
    arr = np.asarray(x, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionMismatch(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_finite(arr, name="array"):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteInput(f"{name} contains non-finite values")
    return arr


def check_same_length(*named_arrays):
    lengths = {name: len(a) for name, a in named_arrays}
    if len(set(lengths.values())) > 1:
        raise DimensionMismatch(f"length mismatch: {lengths}")


def symmetrize(M):
    return (M + M.T) / 2.0


def check_square(M, dim=None, name="matrix"):
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {M.shape}")
    if dim is not None and M.shape[0] != dim:
        raise DimensionMismatch(f"{name} must be {dim}x{dim}, got shape {M.shape}")
    return M
