"""Dense N-way tensors with missing entries, and the multilinear algebra on them.

Conventions
-----------
Tensors are stored as numpy arrays of shape ``(I_1, ..., I_N)``. The
linearization used everywhere (vectorization, file order, covariance
Kronecker order) is the one in which the first mode varies fastest, i.e.
Fortran order.  The mode-``n`` matricization maps entry ``(i_1, ..., i_N)`` to
row ``i_n`` and to the column obtained by linearizing the remaining indices
in the same first-fastest order.  With this convention

    X_(n) = U^n (U^N ⊙ ... ⊙ U^{n+1} ⊙ U^{n-1} ⊙ ... ⊙ U^1)^T

for ``X = [[U^1, ..., U^N]]``.  Modes are 0-based in the Python API.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import reduce

import numpy as np

MAX_MODES = 8


def _check_mode(n, ndim):
    if not 0 <= n < ndim:
        raise ValueError(f"mode {n} out of range for a {ndim}-way tensor")


def matricize(t, n):
    """Mode-``n`` unfolding of a tensor.

    Parameters
    ----------
    t : array_like or MaskedTensor
        Tensor of shape ``(I_1, ..., I_N)``.
    n : int
        0-based mode.

    Returns
    -------
    ndarray of shape ``(I_n, prod_{k != n} I_k)``
    """
    x = t.values if isinstance(t, MaskedTensor) else np.asarray(t)
    _check_mode(n, x.ndim)
    return np.reshape(np.moveaxis(x, n, 0), (x.shape[n], -1), order="F")


def fold(m, n, shape):
    """Inverse of :func:`matricize`."""
    shape = tuple(shape)
    _check_mode(n, len(shape))
    rest = shape[:n] + shape[n + 1:]
    x = np.reshape(np.asarray(m), (shape[n],) + rest, order="F")
    return np.moveaxis(x, 0, n)


def khatri_rao(a, b):
    """Column-wise Kronecker product; column ``r`` is ``kron(a[:, r], b[:, r])``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("khatri_rao expects two matrices")
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"column counts differ: {a.shape[1]} vs {b.shape[1]}"
        )
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def khatri_rao_chain(mats):
    """``mats[0] ⊙ mats[1] ⊙ ...`` evaluated left to right."""
    return reduce(khatri_rao, mats)


def kronecker(a, b):
    return np.kron(np.asarray(a), np.asarray(b))


def hadamard(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"hadamard needs equal shapes, got {a.shape} and {b.shape}")
    return a * b


def design_matrix(factors, n):
    """Khatri-Rao product of all factors except mode ``n``, largest mode first.

    This is the ``A_(n)`` with ``X_(n) = U^n A_(n)^T``.
    """
    others = [factors[k] for k in reversed(range(len(factors))) if k != n]
    return khatri_rao_chain(others)


def gram_product(factors, n):
    """``A_(n)^T A_(n)`` computed as the Hadamard product of factor Gram matrices."""
    grams = [f.T @ f for k, f in enumerate(factors) if k != n]
    return reduce(np.multiply, grams)


def balance_columns(factors):
    """Rescale each component so its column norm is equal in every mode.

    The reconstruction is unchanged.  Components with a zero column are left
    as they are.
    """
    factors = [np.array(f, dtype=float) for f in factors]
    norms = np.array([np.linalg.norm(f, axis=0) for f in factors])  # (N, R)
    ok = np.all(norms > 0, axis=0)
    if not ok.any():
        return factors
    logs = np.log(norms[:, ok])
    target = logs.mean(axis=0)
    for n, f in enumerate(factors):
        f[:, ok] *= np.exp(target - logs[n])
    return factors


def mode_product(x, m, n):
    """Multiply tensor ``x`` along mode ``n`` by matrix ``m`` (``x ×_n m``)."""
    y = np.tensordot(m, x, axes=(1, n))
    return np.moveaxis(y, 0, n)


def mttkrp(x, factors, n):
    """Matricized tensor times Khatri-Rao product, ``X_(n) A_(n)``."""
    return matricize(x, n) @ design_matrix(factors, n)


@dataclass(frozen=True)
class CPModel:
    """Rank-``R`` CP model ``sum_r weights[r] * u_r^1 ∘ ... ∘ u_r^N``.

    ``weights`` is ``None`` for the unnormalized form.
    """

    factors: tuple
    weights: np.ndarray | None = None

    def __post_init__(self):
        factors = tuple(np.array(f, dtype=float) for f in self.factors)
        if not factors:
            raise ValueError("a CP model needs at least one factor matrix")
        if len(factors) > MAX_MODES:
            raise ValueError(f"at most {MAX_MODES} modes are supported")
        ranks = {f.shape[1] if f.ndim == 2 else -1 for f in factors}
        if len(ranks) != 1 or -1 in ranks:
            raise ValueError("factor matrices must be 2-D with a common column count")
        rank = ranks.pop()
        if rank < 1:
            raise ValueError("rank must be at least 1")
        if not all(np.all(np.isfinite(f)) for f in factors):
            raise ValueError("factor entries must be finite")
        for f in factors:
            f.setflags(write=False)
        object.__setattr__(self, "factors", factors)
        if self.weights is not None:
            w = np.array(self.weights, dtype=float).reshape(-1)
            if w.shape != (rank,):
                raise ValueError("weights must have one entry per component")
            w.setflags(write=False)
            object.__setattr__(self, "weights", w)

    @property
    def rank(self):
        return self.factors[0].shape[1]

    @property
    def shape(self):
        return tuple(f.shape[0] for f in self.factors)

    @property
    def ndim(self):
        return len(self.factors)

    def normalized(self):
        """Unit-norm columns with the scales collected in ``weights``.

        Zero columns keep weight 0 and are left as they are.
        """
        w = np.ones(self.rank) if self.weights is None else self.weights.copy()
        out = []
        for f in self.factors:
            norms = np.linalg.norm(f, axis=0)
            safe = np.where(norms > 0, norms, 1.0)
            out.append(f / safe)
            w = w * norms
        return CPModel(tuple(out), w)

    def absorbed(self):
        """Unnormalized form with the weights spread evenly over the modes."""
        if self.weights is None:
            return self
        w = self.weights
        scale = np.sign(w) * np.abs(w) ** (1.0 / self.ndim)
        root = np.abs(w) ** (1.0 / self.ndim)
        factors = [f * root for f in self.factors]
        factors[0] = self.factors[0] * scale
        return CPModel(tuple(factors))

    def full(self):
        return cp_reconstruct(self)


def cp_reconstruct(model):
    """Dense tensor of a :class:`CPModel`."""
    factors = list(model.factors)
    if model.weights is not None:
        factors[0] = factors[0] * model.weights
    shape = tuple(f.shape[0] for f in factors)
    if len(factors) == 1:
        return factors[0].sum(axis=1)
    flat = factors[0] @ design_matrix(factors, 0).T
    return fold(flat, 0, shape)


class MaskedTensor:
    """Dense tensor with a set of missing entries.

    Missing entries hold NaN in ``values``; observed entries are finite.
    Instances are read-only.

    Parameters
    ----------
    values : array_like
        Tensor values; NaN marks missing entries unless ``mask`` is given.
    mask : array_like of bool, optional
        True where an entry is missing. Values under the mask are replaced
        by NaN.
    """

    def __init__(self, values, mask=None):
        values = np.array(values, dtype=float)
        if values.ndim < 1 or values.ndim > MAX_MODES:
            raise ValueError(f"tensors must have between 1 and {MAX_MODES} modes")
        if min(values.shape) < 1:
            raise ValueError("all dimensions must be positive")
        if mask is None:
            mask = np.isnan(values)
        else:
            mask = np.array(mask, dtype=bool)
            if mask.shape != values.shape:
                raise ValueError("mask shape does not match values")
        observed = values[~mask]
        if not np.all(np.isfinite(observed)):
            raise ValueError("observed entries must be finite")
        values[mask] = np.nan
        values.setflags(write=False)
        mask.setflags(write=False)
        self._values = values
        self._mask = mask

    @classmethod
    def from_missing_index(cls, values, missing_index):
        """Build from a full array and an ``(m, N)`` array of 0-based missing indices."""
        values = np.array(values, dtype=float)
        mask = np.zeros(values.shape, dtype=bool)
        idx = np.asarray(missing_index, dtype=int).reshape(-1, values.ndim)
        if idx.size:
            if np.any(idx < 0) or np.any(idx >= np.array(values.shape)):
                raise ValueError("missing index outside tensor dimensions")
            mask[tuple(idx.T)] = True
        return cls(values, mask)

    @property
    def values(self):
        return self._values

    @property
    def mask(self):
        return self._mask

    @property
    def dims(self):
        return self._values.shape

    shape = dims

    @property
    def ndim(self):
        return self._values.ndim

    @property
    def size(self):
        return self._values.size

    @property
    def n_missing(self):
        return int(self._mask.sum())

    @property
    def n_observed(self):
        return self.size - self.n_missing

    def missing_linear(self):
        """Linear (first-mode-fastest) positions of missing entries, ascending."""
        return np.flatnonzero(self._mask.ravel(order="F"))

    def missing_index(self):
        """``(m, N)`` array of 0-based multi-indices of missing entries.

        Rows follow :meth:`missing_linear` order.
        """
        lin = self.missing_linear()
        return np.column_stack(np.unravel_index(lin, self.dims, order="F")).astype(int).reshape(-1, self.ndim)

    def vec(self):
        return self._values.ravel(order="F")

    def filled(self, fill=0.0):
        """Copy of the values with missing entries replaced by ``fill``.

        ``fill`` may be a scalar or an array with one value per missing entry
        in :meth:`missing_linear` order.
        """
        out = np.array(self._values)
        if np.ndim(fill) == 0:
            out[self._mask] = fill
        else:
            flat = out.reshape(-1, order="F")
            flat[self.missing_linear()] = fill
            out = flat.reshape(self.dims, order="F")
        return out

    def with_mask(self, mask):
        """New tensor with extra entries masked (the union of both masks)."""
        return MaskedTensor(self._values, self._mask | np.asarray(mask, dtype=bool))

    def __repr__(self):
        return f"MaskedTensor(dims={self.dims}, missing={self.n_missing})"


def center_observed(t):
    """Subtract the mean of the observed entries.

    Returns
    -------
    centered : MaskedTensor
    mean : float
    """
    if t.n_observed == 0:
        raise ValueError("cannot center a tensor with no observed entries")
    mean = float(np.mean(t.values[~t.mask]))
    return MaskedTensor(t.values - mean, t.mask), mean


def uncenter(values, mean):
    return np.asarray(values) + mean
