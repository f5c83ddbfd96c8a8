"""Input validation helpers shared by the estimators and functional API."""

import numbers

import numpy as np

from .exceptions import DimensionError, PreconditionError, ValidationError

SIMPLEX_TOL = 1e-10


def check_matrix(m, name="matrix", square=True, dtype=float):
    """Return ``m`` as a finite 2-D array, optionally requiring it to be square."""
    arr = np.asarray(m, dtype=dtype)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise DimensionError(f"{name} is empty")
    if square and arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return arr


def check_vector(v, name="vector", size=None, dtype=float):
    arr = np.asarray(v, dtype=dtype)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be 1-dimensional, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise DimensionError(f"{name} has length {arr.shape[0]}, expected {size}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} has non-finite entries")
    return arr


def check_simplex(v, name="probability vector", size=None, tol=SIMPLEX_TOL):
    """Validate a probability vector and return it as float array."""
    arr = check_vector(v, name=name, size=size)
    if np.any(arr < -tol):
        raise ValidationError(f"{name} has negative entries: {arr}")
    if abs(arr.sum() - 1.0) > tol:
        raise ValidationError(f"{name} does not sum to 1 (sum={arr.sum()!r})")
    return np.clip(arr, 0.0, None)


def check_time(t, name="t", strict=False):
    if not isinstance(t, numbers.Real) and not np.isscalar(t):
        raise ValidationError(f"{name} must be a real scalar")
    t = float(t)
    if not np.isfinite(t):
        raise ValidationError(f"{name} must be finite")
    if t < 0 or (strict and t == 0):
        bound = "> 0" if strict else ">= 0"
        raise PreconditionError(f"{name} must be {bound}, got {t}")
    return t


def check_count(k, name="k", minimum=0, maximum=None):
    if isinstance(k, bool) or not isinstance(k, numbers.Integral):
        raise ValidationError(f"{name} must be an integer, got {k!r}")
    k = int(k)
    if k < minimum:
        raise PreconditionError(f"{name} must be >= {minimum}, got {k}")
    if maximum is not None and k > maximum:
        raise PreconditionError(f"{name} must be <= {maximum}, got {k}")
    return k


def check_state(state, n_states, max_count=None):
    """Validate a ``(count, chain_state)`` pair."""
    try:
        k0, j0 = state
    except (TypeError, ValueError):
        raise ValidationError(f"state must be a (count, chain_state) pair, got {state!r}")
    k0 = check_count(k0, "count", maximum=max_count)
    j0 = check_count(j0, "chain_state", maximum=n_states - 1)
    return k0, j0


def basis_vector(j, d):
    e = np.zeros(d)
    e[j] = 1.0
    return e
