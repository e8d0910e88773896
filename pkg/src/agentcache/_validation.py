"""Input validation helpers shared by the estimators and simulators."""

from __future__ import annotations

import numbers

import numpy as np

STOCHASTIC_ATOL = 1e-9


class ValidationError(ValueError):
    """Raised when a user-supplied document or parameter is malformed."""


def check_scalar(x, name, *, kind=numbers.Real, lo=None, hi=None, lo_open=False, hi_open=False):
    if isinstance(x, bool) or not isinstance(x, kind):
        raise ValidationError(f"{name} must be {kind.__name__}, got {type(x).__name__}")
    if lo is not None and (x < lo or (lo_open and x == lo)):
        raise ValidationError(f"{name}={x} is below its lower bound {lo}")
    if hi is not None and (x > hi or (hi_open and x == hi)):
        raise ValidationError(f"{name}={x} is above its upper bound {hi}")
    return x


def check_distribution(p, name="distribution", *, atol=STOCHASTIC_ATOL):
    """Return ``p`` as a float array after checking it lies on the simplex."""
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValidationError(f"{name} must be a non-empty 1-d vector")
    if not np.all(np.isfinite(arr)) or np.any(arr < -atol):
        raise ValidationError(f"{name} has negative or non-finite entries")
    total = arr.sum()
    if abs(total - 1.0) > atol:
        raise ValidationError(f"{name} sums to {total!r}, not 1")
    return arr


def check_distributions(p, name="distributions", *, atol=STOCHASTIC_ATOL):
    arr = np.asarray(p, dtype=float)
    if arr.ndim != 2 or arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ValidationError(f"{name} must be a non-empty 2-d array")
    if not np.all(np.isfinite(arr)) or np.any(arr < -atol):
        raise ValidationError(f"{name} has negative or non-finite entries")
    sums = arr.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > atol)
    if bad.size:
        raise ValidationError(f"{name} row {int(bad[0])} sums to {sums[bad[0]]!r}, not 1")
    return arr


def check_random_state(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
