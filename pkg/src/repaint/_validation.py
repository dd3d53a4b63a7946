"""Input validation helpers shared by the estimators and the functional core."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array


class ContractError(ValueError):
    """Raised when a caller violates an operation's preconditions."""


def check_states(states, dim: int | None = None) -> np.ndarray:
    """Return ``states`` as a finite float64 2-D array, promoting a single vector."""
    arr = np.asarray(states, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ContractError(f"expected a non-empty batch of state vectors, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ContractError("non-finite state")
    if dim is not None and arr.shape[1] != dim:
        raise ContractError(f"expected state dimension {dim}, got {arr.shape[1]}")
    return arr


def validate_observations(X, dim: int | None = None) -> np.ndarray:
    """sklearn-flavoured validation for user-facing estimator inputs."""
    try:
        X = check_array(X, dtype=np.float64, ensure_2d=False)
    except ValueError as exc:
        raise ContractError(str(exc)) from exc
    return check_states(X, dim)


def check_finite(values, what: str = "value") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ContractError(f"non-finite {what}")
    return arr


def check_weights(w, dim: int | None = None) -> np.ndarray:
    arr = check_finite(np.atleast_1d(np.asarray(w, dtype=np.float64)), "weight vector")
    if arr.ndim != 1:
        raise ContractError("weight vector must be one-dimensional")
    if dim is not None and arr.shape[0] != dim:
        raise ContractError(f"expected {dim} feature weights, got {arr.shape[0]}")
    return arr
