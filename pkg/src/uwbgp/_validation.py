"""Small input-validation helpers shared by the estimators."""

import numpy as np

from .exceptions import DimensionMismatch, InputError


def check_points(X, name="X", dim=3):
    """Return ``X`` as a finite float array of shape (n, dim)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1 and X.shape[0] == dim:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimensionMismatch(f"{name} must have shape (n, {dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise InputError(f"{name} contains non-finite values")
    return X


def check_vector(y, n=None, name="y"):
    y = np.asarray(y, dtype=float).ravel()
    if n is not None and y.shape[0] != n:
        raise DimensionMismatch(f"{name} has {y.shape[0]} entries, expected {n}")
    if not np.all(np.isfinite(y)):
        raise InputError(f"{name} contains non-finite values")
    return y


def check_quaternions(q, n=None, tol=1e-6):
    """Validate (n, 4) quaternions in (qx, qy, qz, qw) order and normalise them."""
    q = np.asarray(q, dtype=float)
    if q.ndim != 2 or q.shape[1] != 4:
        raise DimensionMismatch(f"quaternions must have shape (n, 4), got {q.shape}")
    if n is not None and q.shape[0] != n:
        raise DimensionMismatch(f"got {q.shape[0]} quaternions, expected {n}")
    norms = np.linalg.norm(q, axis=1)
    if np.any(np.abs(norms - 1.0) > tol):
        raise InputError("quaternions must have unit norm")
    return q / norms[:, None]

