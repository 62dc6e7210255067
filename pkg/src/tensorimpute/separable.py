"""Gibbs sampler for CP imputation with separable (tensor-normal) errors.

The residual tensor has covariance ``Σ_N ⊗ ... ⊗ Σ_1`` in the
first-mode-fastest vectorization.  Each mode has a policy:

``identity``
    ``Σ_n = I``, not sampled.
``scaled``
    ``Σ_n = s I`` with ``p(s) ∝ 1/s``.
``wishart``
    dense ``Σ_n`` with an ``IW(I, I_n + 2)`` prior.

A sweep visits the modes in order.  For mode ``n`` the data and the
Khatri-Rao design are whitened by the other modes' covariances, ``Σ_n`` is
drawn with ``U^n`` integrated out, and then ``U^n`` is drawn from its
matrix-normal conditional.  Missing entries are redrawn from the Gaussian
conditional given the observed entries, block by block: entries that differ
in an identity or scaled mode coordinate are conditionally independent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .cp import check_rank
from .distributions import (
    CholeskyError,
    jittered_cholesky,
    rng_stream,
    sample_inverse_gamma,
    sample_inverse_wishart,
    sample_matrix_normal,
    spd_inverse,
    symmetric_power,
)
from .draws import McmcConfig, run_chains
from .independent import cp_reconstruct_factors, initial_factors
from .tensor import MaskedTensor, balance_columns, center_observed, khatri_rao_chain, matricize, mode_product

POLICIES = ("identity", "scaled", "wishart")
DENSE_CAP = 4096


class ConditionalTooLargeError(ValueError):
    pass


def default_policies(ndim):
    """First mode (samples) identity, every other mode a dense covariance."""
    return ("identity",) + ("wishart",) * (ndim - 1)


def _check_policies(policies, ndim):
    policies = tuple(policies)
    if len(policies) != ndim:
        raise ValueError(f"need one covariance policy per mode, got {len(policies)} for {ndim}")
    for p in policies:
        if p not in POLICIES:
            raise ValueError(f"unknown covariance policy {p!r}; expected one of {POLICIES}")
    return policies


class SeparableCovariance:
    """Per-mode covariances of a tensor-normal error.

    Parameters
    ----------
    dims : sequence of int
    policies : sequence of str
        One of ``identity``, ``scaled``, ``wishart`` per mode.
    matrices : sequence, optional
        Per mode: ``None`` for identity, a positive float for a scaled
        identity, or a dense ``I_n x I_n`` matrix.  Defaults to identities.
    """

    def __init__(self, dims, policies=None, matrices=None):
        self.dims = tuple(int(d) for d in dims)
        self.policies = _check_policies(policies or default_policies(len(self.dims)), len(self.dims))
        if matrices is None:
            matrices = [None if p == "identity" else (1.0 if p == "scaled" else np.eye(d))
                        for p, d in zip(self.policies, self.dims)]
        self.matrices = [self._coerce(m, n) for n, m in enumerate(matrices)]

    def _coerce(self, m, n):
        d = self.dims[n]
        p = self.policies[n]
        if p == "identity":
            if m is not None and not np.allclose(m, np.eye(d)):
                raise ValueError(f"mode {n} is an identity mode")
            return None
        if p == "scaled":
            s = float(m)
            if not s > 0:
                raise ValueError("scaled-identity variance must be positive")
            return s
        m = np.array(m, dtype=float)
        if m.shape != (d, d):
            raise ValueError(f"mode {n} covariance must be {d}x{d}")
        if not np.allclose(m, m.T, atol=1e-10 * max(1.0, np.abs(m).max())):
            raise ValueError(f"mode {n} covariance is not symmetric")
        try:
            linalg.cholesky(m, lower=True)
        except linalg.LinAlgError as exc:
            raise ValueError(f"mode {n} covariance is not positive definite") from exc
        return 0.5 * (m + m.T)

    def copy(self):
        out = SeparableCovariance.__new__(SeparableCovariance)
        out.dims = self.dims
        out.policies = self.policies
        out.matrices = [m.copy() if isinstance(m, np.ndarray) else m for m in self.matrices]
        return out

    @property
    def ndim(self):
        return len(self.dims)

    def is_diagonal(self, n):
        return self.policies[n] != "wishart"

    def dense(self, n):
        m = self.matrices[n]
        if m is None:
            return np.eye(self.dims[n])
        if isinstance(m, float):
            return m * np.eye(self.dims[n])
        return m

    def diagonal_scale(self):
        """Product of the scaled-identity variances."""
        return float(math.prod(m for m in self.matrices if isinstance(m, float)))

    def full(self):
        """Dense ``Σ_N ⊗ ... ⊗ Σ_1`` (small tensors only)."""
        out = np.ones((1, 1))
        for n in reversed(range(self.ndim)):
            out = np.kron(out, self.dense(n))
        return out

    def inv_sqrt(self, n):
        """``Σ_n^{-1/2}`` as ``None`` (identity), a scalar, or a symmetric matrix."""
        m = self.matrices[n]
        if m is None:
            return None
        if isinstance(m, float):
            return 1.0 / math.sqrt(m)
        return symmetric_power(m, -0.5)

    def logdet(self, n):
        m = self.matrices[n]
        if m is None:
            return 0.0
        if isinstance(m, float):
            return self.dims[n] * math.log(m)
        return float(np.linalg.slogdet(m)[1])

    def __repr__(self):
        return f"SeparableCovariance(dims={self.dims}, policies={self.policies})"


def _apply(x, w, n):
    if w is None:
        return x
    if np.ndim(w) == 0:
        return x * w
    return mode_product(x, w, n)


def whiten_mode(x, factors, n, cov):
    """Whiten the mode-``n`` regression by the other modes' covariances.

    Returns ``(Ã, X̃)`` with ``Ã = Σ_{-n}^{-1/2} A_(n)`` (``I_{-n} x R``) and
    ``X̃ = X_(n) Σ_{-n}^{-1/2}`` (``I_n x I_{-n}``), where ``Σ_{-n}`` is the
    Kronecker product of the other modes' covariances in the column order of
    the mode-``n`` unfolding.  Each factor of ``Σ_{-n}^{-1/2}`` is applied by a
    mode product, so no ``I_{-n} x I_{-n}`` matrix is formed.
    """
    xw = x
    design = []
    for k in reversed(range(len(factors))):
        if k == n:
            continue
        w = cov.inv_sqrt(k)
        xw = _apply(xw, w, k)
        if w is None:
            design.append(factors[k])
        elif np.ndim(w) == 0:
            design.append(factors[k] * w)
        else:
            design.append(w @ factors[k])
    return khatri_rao_chain(design), matricize(xw, n)


def _mode_regression(x, factors, n, cov):
    a_t, x_t = whiten_mode(x, factors, n, cov)
    gram_inv, singular = spd_inverse(a_t.T @ a_t)
    mean = x_t @ a_t @ gram_inv
    resid = x_t - mean @ a_t.T
    return mean, gram_inv, resid, singular


def sigma_conditional(resid, rank, policy):
    """Parameters of the ``Σ_n`` draw with ``U^n`` integrated out.

    ``resid`` is the whitened residual at the conditional-mean factor.  For a
    dense mode the draw is ``IW(I + R R^T, I_n + 2 + I_{-n} - rank)``; for a
    scaled mode ``s ~ IG(I_n (I_{-n} - rank) / 2, ||R||^2 / 2)``.
    """
    i_n, i_rest = resid.shape
    if policy == "wishart":
        return np.eye(i_n) + resid @ resid.T, i_n + 2 + i_rest - rank
    if policy == "scaled":
        return i_n * (i_rest - rank) / 2.0, max(float(np.vdot(resid, resid)), 1e-300) / 2.0
    raise ValueError(f"mode policy {policy!r} is not sampled")


def _draw_sigma(resid, rank, policy, rng):
    a, b = sigma_conditional(resid, rank, policy)
    if policy == "wishart":
        return sample_inverse_wishart(a, b, rng)
    return float(sample_inverse_gamma(a, b, rng))


def _row_chol(cov, n):
    m = cov.matrices[n]
    if m is None:
        return None
    if isinstance(m, float):
        return math.sqrt(m) * np.eye(cov.dims[n])
    return jittered_cholesky(m)


@dataclass
class SepChainState:
    factors: list
    cov: SeparableCovariance
    completed: np.ndarray
    missing: np.ndarray
    rng: np.random.Generator
    plan: object
    iteration: int = 0
    lowrank: np.ndarray | None = None
    flags: set = field(default_factory=set)


def sample_sigma_mode(state, n):
    """Draw ``Σ_n`` given everything except ``U^n``."""
    policy = state.cov.policies[n]
    _, _, resid, _ = _mode_regression(state.completed, state.factors, n, state.cov)
    return _draw_sigma(resid, state.factors[n].shape[1], policy, state.rng)


def sample_factor_mode(state, n):
    """Draw ``U^n ~ MN(X̃ Ã (Ã^T Ã)^{-1}, Σ_n, (Ã^T Ã)^{-1})``."""
    mean, gram_inv, _, singular = _mode_regression(state.completed, state.factors, n, state.cov)
    if singular:
        state.flags.add("singular_gram")
    return sample_matrix_normal(mean, _row_chol(state.cov, n), jittered_cholesky(gram_inv), state.rng)


# ---------------------------------------------------------------------------
# conditional imputation


@dataclass
class Block:
    key: tuple
    missing: np.ndarray  # multi-indices (m, N)
    observed: np.ndarray  # multi-indices (o, N)
    missing_pos: np.ndarray  # positions in the global missing order
    observed_lin: np.ndarray  # first-mode-fastest linear positions
    missing_lin: np.ndarray


@dataclass
class ConditionalPlan:
    """Independence blocks of a mask under a set of diagonal modes."""

    dims: tuple
    diagonal_modes: tuple
    blocks: list

    @property
    def n_blocks(self):
        return len(self.blocks)

    @property
    def all_diagonal(self):
        return len(self.diagonal_modes) == len(self.dims)


def build_conditional_plan(mask, policies, dense_cap=DENSE_CAP):
    """Partition all entries into conditionally independent blocks.

    Entries fall in the same block when they share every coordinate of the
    identity and scaled modes.  Without any such mode the whole tensor is a
    single block, allowed only up to ``dense_cap`` entries.
    """
    mask = np.asarray(mask, dtype=bool)
    dims = mask.shape
    policies = _check_policies(policies, len(dims))
    diag = tuple(n for n, p in enumerate(policies) if p != "wishart")
    size = mask.size
    if not diag and size > dense_cap:
        raise ConditionalTooLargeError(
            f"conditional too large: no identity mode and {size} entries exceed the dense cap of {dense_cap}"
        )
    lin = np.arange(size)
    idx = np.column_stack(np.unravel_index(lin, dims, order="F"))
    miss_flat = mask.ravel(order="F")
    miss_order = np.cumsum(miss_flat) - 1
    if diag:
        keys = np.ravel_multi_index(tuple(idx[:, diag].T), tuple(dims[n] for n in diag), order="F")
    else:
        keys = np.zeros(size, dtype=int)
    order = np.argsort(keys, kind="stable")
    bounds = np.flatnonzero(np.diff(keys[order])) + 1
    blocks = []
    for members in np.split(order, bounds):
        m = miss_flat[members]
        key = tuple(int(v) for v in idx[members[0], list(diag)]) if diag else ()
        blocks.append(Block(
            key=key,
            missing=idx[members[m]],
            observed=idx[members[~m]],
            missing_pos=miss_order[members[m]],
            observed_lin=members[~m],
            missing_lin=members[m],
        ))
    return ConditionalPlan(tuple(dims), diag, blocks)


def _cross_cov(cov, a, b):
    """Covariance between entries at multi-indices ``a`` and ``b`` within one block."""
    out = np.full((a.shape[0], b.shape[0]), cov.diagonal_scale())
    for n in range(cov.ndim):
        if not cov.is_diagonal(n):
            out *= cov.matrices[n][np.ix_(a[:, n], b[:, n])]
    return out


def block_conditional(block, mean_vec, x_vec, cov):
    """Mean and covariance of a block's missing entries given its observed ones.

    ``mean_vec`` and ``x_vec`` are first-mode-fastest vectorizations of the
    low-rank mean and the data.
    """
    mu_m = mean_vec[block.missing_lin]
    s11 = _cross_cov(cov, block.missing, block.missing)
    if block.observed.shape[0] == 0:
        return mu_m, s11
    s22 = _cross_cov(cov, block.observed, block.observed)
    s12 = _cross_cov(cov, block.missing, block.observed)
    c22 = jittered_cholesky(s22).L
    # K = S12 S22^{-1}
    k = linalg.cho_solve((c22, True), s12.T, check_finite=False).T
    resid = x_vec[block.observed_lin] - mean_vec[block.observed_lin]
    mu = mu_m + k @ resid
    sig = s11 - k @ s12.T
    return mu, 0.5 * (sig + sig.T)


def predictive_impute(state, plan):
    """Draw all missing entries from their conditional given the observed ones.

    Returns values in the global missing order.
    """
    cov = state.cov
    mean_vec = state.lowrank.ravel(order="F")
    x_vec = state.completed.ravel(order="F")
    n_missing = int(state.missing.sum())
    out = np.empty(n_missing)
    rng = state.rng
    if plan.all_diagonal:
        pos = np.flatnonzero(state.missing.ravel(order="F"))
        out[:] = mean_vec[pos] + math.sqrt(cov.diagonal_scale()) * rng.standard_normal(n_missing)
        return out
    for b, block in enumerate(plan.blocks):
        if block.missing.shape[0] == 0:
            continue
        mu, sig = block_conditional(block, mean_vec, x_vec, cov)
        try:
            L = jittered_cholesky(sig)
        except CholeskyError as exc:
            raise CholeskyError(f"conditional covariance of block {b} {block.key} is not PD") from exc
        out[block.missing_pos] = mu + L.L @ rng.standard_normal(mu.size)
    return out


# ---------------------------------------------------------------------------
# chain


def init_sep(t, rank, policies, strategy="em", rng=None, plan=None):
    """Initial state on the centered tensor ``t``: all covariances identity."""
    rng = rng_stream(rng)
    check_rank(rank, t.dims)
    policies = _check_policies(policies, t.ndim)
    factors = initial_factors(t, rank, strategy, rng)
    x = t.filled(0.0)
    if plan is None:
        plan = build_conditional_plan(t.mask, policies)
    cov = SeparableCovariance(t.dims, policies)
    return SepChainState(factors, cov, x, t.mask, rng, plan, 0, cp_reconstruct_factors(factors))


def step_sep(s):
    """One sweep: ``Σ_n`` then ``U^n`` for each mode, then the missing entries."""
    rng = s.rng
    factors = [np.array(f) for f in s.factors]
    cov = s.cov.copy()
    flags = set(s.flags)
    x = s.completed
    rank = factors[0].shape[1]
    for n in range(len(factors)):
        policy = cov.policies[n]
        mean, gram_inv, resid, singular = _mode_regression(x, factors, n, cov)
        if singular:
            flags.add("singular_gram")
        if policy != "identity":
            cov.matrices[n] = _draw_sigma(resid, rank, policy, rng)
        factors[n] = sample_matrix_normal(mean, _row_chol(cov, n), jittered_cholesky(gram_inv), rng)
    factors = balance_columns(factors)
    lowrank = cp_reconstruct_factors(factors)
    new = SepChainState(factors, cov, x, s.missing, rng, s.plan, s.iteration + 1, lowrank, flags)
    values = predictive_impute(new, s.plan)
    flat = np.array(x).ravel(order="F")
    flat[np.flatnonzero(s.missing.ravel(order="F"))] = values
    new.completed = flat.reshape(x.shape, order="F")
    return new


def run_sep(t, rank, cfg=None, policies=None):
    """Multiple imputation under separable errors.

    Returns
    -------
    ImputationResult
        ``draws.lowrank`` holds the low-rank-only imputations.  ``extras``
        carries ``covariance_mean`` / ``covariance_sd`` (per mode, averaged
        over chains) and the policies.
    """
    cfg = cfg or McmcConfig()
    if not isinstance(t, MaskedTensor):
        t = MaskedTensor(t)
    check_rank(rank, t.dims)
    policies = _check_policies(policies or default_policies(t.ndim), t.ndim)
    centered, offset = center_observed(t)
    plan = build_conditional_plan(t.mask, policies)
    lin = t.mask.ravel(order="F")
    sampled = [n for n, p in enumerate(policies) if p != "identity"]

    def extract(state):
        scalars = {f"logdet{n + 1}": state.cov.logdet(n) for n in sampled}
        return (
            state.completed.ravel(order="F")[lin],
            state.lowrank.ravel(order="F")[lin],
            scalars,
        )

    def collect(state):
        return {n: state.cov.dense(n) for n in sampled}

    result = run_chains(
        t,
        rank,
        cfg,
        init_chain=lambda rng: init_sep(centered, rank, policies, cfg.init, rng, plan),
        step=step_sep,
        extract=extract,
        offset=offset,
        engine="correlated",
        collect=collect,
    )
    cov_mean = {}
    cov_sd = {}
    for n in sampled:
        m1 = np.mean([c.moments[n][0] for c in result.chains], axis=0)
        m2 = np.mean([c.moments[n][1] for c in result.chains], axis=0)
        cov_mean[n] = m1
        cov_sd[n] = np.sqrt(np.maximum(m2 - m1 * m1, 0.0))
    result.extras.update(policies=policies, covariance_mean=cov_mean, covariance_sd=cov_sd)
    return result
