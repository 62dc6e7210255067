"""Least-squares CP fitting and EM imputation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import pseudo_inverse, rng_stream
from .tensor import (
    CPModel,
    MaskedTensor,
    center_observed,
    cp_reconstruct,
    gram_product,
    mttkrp,
)


@dataclass(frozen=True)
class AlsConfig:
    """Settings for :func:`als_fit`.

    ``init`` is ``"random"`` (standard-normal factor entries) or a
    :class:`CPModel` to start from.
    """

    rank: int
    max_iter: int = 500
    rel_tol: float = 1e-8
    init: object = "random"
    seed: object = None

    def __post_init__(self):
        if int(self.rank) < 1:
            raise ValueError("rank must be at least 1")
        if int(self.max_iter) < 1:
            raise ValueError("max_iter must be at least 1")
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if not (self.init == "random" or isinstance(self.init, CPModel)):
            raise ValueError("init must be 'random' or a CPModel")


@dataclass
class AlsResult:
    model: CPModel
    trace: list = field(default_factory=list)
    n_iter: int = 0
    converged: bool = False

    @property
    def ssr(self):
        return self.trace[-1] if self.trace else math.nan


@dataclass
class EMResult:
    """Output of :func:`em_impute`.

    ``model`` describes the centered data; ``completed`` is on the original
    scale with observed entries untouched.
    """

    model: CPModel
    completed: np.ndarray
    offset: float
    converged: bool
    n_iter: int
    changes: list = field(default_factory=list)


def check_rank(rank, dims):
    rank = int(rank)
    if rank < 1:
        raise ValueError("rank must be at least 1")
    total = math.prod(dims)
    for n, d in enumerate(dims):
        if rank > total // d:
            raise ValueError(
                f"rank {rank} exceeds the {total // d} columns of the mode-{n} unfolding"
            )
    return rank


def _initial_factors(dims, cfg):
    if isinstance(cfg.init, CPModel):
        if cfg.init.shape != tuple(dims) or cfg.init.rank != cfg.rank:
            raise ValueError("initial model does not match the tensor shape and rank")
        return [np.array(f) for f in cfg.init.absorbed().factors]
    rng = rng_stream(cfg.seed)
    return [rng.standard_normal((d, cfg.rank)) for d in dims]


def _als_sweep(x, factors):
    """One pass over the modes; returns the weights of the last normalization."""
    weights = np.ones(factors[0].shape[1])
    for n in range(len(factors)):
        v = gram_product(factors, n)
        u = mttkrp(x, factors, n) @ pseudo_inverse(v)
        norms = np.linalg.norm(u, axis=0)
        weights = norms
        safe = np.where(norms > 0, norms, 1.0)
        factors[n] = u / safe
    return weights


def als_fit(x, cfg):
    """Fit a rank-``cfg.rank`` CP model to a fully observed tensor by ALS.

    Each mode update solves the least-squares problem
    ``U^n = X_(n) A_(n) [A_(n)^T A_(n)]^+`` with the Gram matrix formed as a
    Hadamard product, then normalizes the columns and carries the norms as
    weights.  Stops when the relative change of the residual sum of squares
    drops below ``rel_tol``.
    """
    if isinstance(x, MaskedTensor):
        if x.n_missing:
            raise ValueError("als_fit needs a fully observed tensor; use em_impute")
        x = x.values
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("tensor has non-finite entries")
    check_rank(cfg.rank, x.shape)
    factors = _initial_factors(x.shape, cfg)
    return _als_loop(x, factors, cfg.max_iter, cfg.rel_tol)


def _als_loop(x, factors, max_iter, rel_tol):
    trace = []
    norm_x = float(np.sum(x * x))
    prev = math.inf
    weights = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        weights = _als_sweep(x, factors)
        last = factors[-1] * weights
        model = CPModel(tuple(factors[:-1]) + (last,))
        ssr = float(np.sum((x - cp_reconstruct(model)) ** 2))
        trace.append(ssr)
        if ssr <= 1e-28 * max(norm_x, 1.0) or (math.isfinite(prev) and abs(prev - ssr) <= rel_tol * prev):
            converged = True
            break
        prev = ssr
    model = CPModel(tuple(factors), weights)
    return AlsResult(model=model, trace=trace, n_iter=it, converged=converged)


def em_impute(t, cfg, em_max_iter=200, em_tol=1e-6, inner_sweeps=5):
    """EM imputation of missing entries with a CP model.

    The tensor is centered on its observed mean, missing entries start at
    zero, then ALS on the completed tensor and replacement of the missing
    entries by the reconstruction alternate until the relative change of the
    imputed values falls below ``em_tol``.  ``inner_sweeps`` ALS sweeps are
    run per EM iteration.  Non-convergence is reported through
    ``EMResult.converged``.
    """
    if not isinstance(t, MaskedTensor):
        t = MaskedTensor(t)
    if t.n_observed == 0:
        raise ValueError("no observed entries to fit")
    centered, offset = center_observed(t)
    check_rank(cfg.rank, t.dims)
    mask = t.mask
    if not mask.any():
        res = als_fit(centered.values, cfg)
        return EMResult(res.model, np.array(t.values), offset, res.converged, res.n_iter)
    x = centered.filled(0.0)
    factors = _initial_factors(t.dims, cfg)
    model = None
    changes = []
    converged = False
    it = 0
    for it in range(1, em_max_iter + 1):
        res = _als_loop(x, factors, inner_sweeps, cfg.rel_tol)
        model = res.model
        factors = list(model.absorbed().factors)
        old = x[mask]
        new = cp_reconstruct(model)[mask]
        x[mask] = new
        change = float(np.linalg.norm(new - old) / max(np.linalg.norm(new), 1e-12))
        changes.append(change)
        if change < em_tol:
            converged = True
            break
    completed = np.array(t.values)
    completed[mask] = x[mask] + offset
    return EMResult(model, completed, offset, converged, it, changes)


def em_sweep(completed, mask, model, inner_sweeps=1):
    """One EM iteration on an already-completed (centered) tensor.

    Returns the updated model and the new values at ``mask``.
    """
    x = np.array(completed, dtype=float)
    factors = [np.array(f) for f in model.absorbed().factors]
    res = _als_loop(x, factors, inner_sweeps, 1e-300)
    return res.model, cp_reconstruct(res.model)[mask]
