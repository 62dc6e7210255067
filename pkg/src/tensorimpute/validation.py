"""Input checks shared by the estimators and the command line."""

from __future__ import annotations

import numbers

import numpy as np
from sklearn.utils import check_random_state

from .tensor import MaskedTensor


def check_tensor(x, allow_missing=True, min_ndim=2):
    """Coerce ``x`` to a :class:`MaskedTensor`; NaN marks missing entries."""
    if isinstance(x, MaskedTensor):
        t = x
    else:
        arr = np.asarray(x, dtype=float)
        if np.any(np.isinf(arr)):
            raise ValueError("tensor has infinite entries")
        t = MaskedTensor(arr, np.isnan(arr))
    if t.ndim < min_ndim:
        raise ValueError(f"expected at least {min_ndim} modes, got {t.ndim}")
    if not allow_missing and t.n_missing:
        raise ValueError("tensor has missing entries")
    if t.n_observed == 0:
        raise ValueError("tensor has no observed entries")
    return t


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_seed(random_state):
    """Integer seed from ``None``, an int, a ``RandomState`` or a ``Generator``."""
    if random_state is None:
        return None
    if isinstance(random_state, np.random.Generator):
        return int(random_state.integers(2**63))
    if isinstance(random_state, numbers.Integral) and not isinstance(random_state, bool):
        if random_state < 0:
            raise ValueError("seed must be nonnegative")
        return int(random_state)
    return int(check_random_state(random_state).randint(2**31 - 1))


def check_same_pattern(t, fitted_shape, fitted_mask):
    if t.dims != tuple(fitted_shape) or not np.array_equal(t.mask, fitted_mask):
        raise ValueError("transform needs the tensor (and missing pattern) seen in fit")
