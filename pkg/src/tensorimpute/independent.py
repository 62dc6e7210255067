"""Gibbs sampler for CP imputation with i.i.d. Gaussian errors.

Model: ``X = [[U^1, ..., U^N]] + E`` with ``E`` i.i.d. ``N(0, sigma2)``, flat
priors on the factors and ``p(sigma2) ∝ 1/sigma2``.  Missing entries are
treated as latent and redrawn from their predictive distribution on every
sweep, so each sweep conditions on the completed tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cp import AlsConfig, check_rank, em_impute
from .distributions import (
    jittered_cholesky,
    rng_stream,
    sample_inverse_gamma,
    sample_matrix_normal,
    spd_inverse,
)
from .draws import McmcConfig, run_chains
from .tensor import CPModel, MaskedTensor, balance_columns, center_observed, cp_reconstruct, gram_product, mttkrp


@dataclass
class IndepChainState:
    factors: list
    sigma2: float
    completed: np.ndarray
    missing: np.ndarray
    rng: np.random.Generator
    iteration: int = 0
    lowrank: np.ndarray | None = None
    flags: set = field(default_factory=set)


def _ssr(x, lowrank):
    r = x - lowrank
    return float(np.vdot(r, r))


def _draw_sigma2(x, lowrank, rng):
    rate = max(_ssr(x, lowrank), 1e-300) / 2.0
    return float(sample_inverse_gamma(x.size / 2.0, rate, rng))


def initial_factors(t, rank, strategy, rng):
    """Starting factors on the centered scale: EM fit or standard-normal entries."""
    if strategy == "em":
        res = em_impute(t, AlsConfig(rank=rank, seed=rng.integers(2**63)), em_max_iter=100, em_tol=1e-5)
        return [np.array(f) for f in res.model.absorbed().factors]
    if strategy == "random":
        return [rng.standard_normal((d, rank)) for d in t.dims]
    raise ValueError(f"unknown initialization {strategy!r}")


def init_indep(t, rank, strategy="em", rng=None):
    """Initial chain state.

    ``t`` must already be centered.  Missing entries start at zero and
    ``sigma2`` is drawn from its inverse-gamma conditional given the initial
    factors.
    """
    rng = rng_stream(rng)
    check_rank(rank, t.dims)
    factors = initial_factors(t, rank, strategy, rng)
    x = t.filled(0.0)
    lowrank = cp_reconstruct_factors(factors)
    sigma2 = _draw_sigma2(x, lowrank, rng)
    return IndepChainState(factors, sigma2, x, t.mask, rng, 0, lowrank)


def cp_reconstruct_factors(factors):
    return cp_reconstruct(CPModel(tuple(factors)))


def factor_conditional(x, factors, n):
    """Mean ``X_(n) A (A^T A)^{-1}`` and ``(A^T A)^{-1}`` for mode ``n``."""
    gram_inv, singular = spd_inverse(gram_product(factors, n))
    mean = mttkrp(x, factors, n) @ gram_inv
    return mean, gram_inv, singular


def step_indep(s):
    """One sweep: every factor matrix, then ``sigma2``, then the missing entries."""
    rng = s.rng
    factors = [np.array(f) for f in s.factors]
    x = s.completed
    flags = set(s.flags)
    for n in range(len(factors)):
        mean, gram_inv, singular = factor_conditional(x, factors, n)
        if singular:
            flags.add("singular_gram")
        col = jittered_cholesky(s.sigma2 * gram_inv)
        # rows of U^n are i.i.d. given the rest and share one covariance factor
        factors[n] = sample_matrix_normal(mean, None, col, rng)
    # the flat prior leaves the per-mode scale of each component free; letting
    # it wander ruins the conditioning of the Gram matrices
    factors = balance_columns(factors)
    lowrank = cp_reconstruct_factors(factors)
    sigma2 = _draw_sigma2(x, lowrank, rng)
    x = np.array(x)
    m = s.missing
    x[m] = lowrank[m] + math.sqrt(sigma2) * rng.standard_normal(int(m.sum()))
    return IndepChainState(factors, sigma2, x, m, rng, s.iteration + 1, lowrank, flags)


def run_indep(t, rank, cfg=None):
    """Multiple imputation under i.i.d. errors.

    Parameters
    ----------
    t : MaskedTensor
    rank : int
    cfg : McmcConfig

    Returns
    -------
    ImputationResult
        Draws are on the original scale.  Each chain monitors ``sigma2`` and a
        seeded subset of missing entries.
    """
    cfg = cfg or McmcConfig()
    if not isinstance(t, MaskedTensor):
        t = MaskedTensor(t)
    check_rank(rank, t.dims)
    centered, offset = center_observed(t)
    lin = t.mask.ravel(order="F")

    def extract(state):
        return (
            state.completed.ravel(order="F")[lin],
            state.lowrank.ravel(order="F")[lin],
            {"sigma2": state.sigma2},
        )

    return run_chains(
        t,
        rank,
        cfg,
        init_chain=lambda rng: init_indep(centered, rank, cfg.init, rng),
        step=step_indep,
        extract=extract,
        offset=offset,
        engine="independent",
    )

