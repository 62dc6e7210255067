"""scikit-learn style wrappers.

Tensor imputation is transductive: ``fit`` learns from the observed entries
of one tensor and ``transform`` fills the missing entries of that same
tensor.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .cp import AlsConfig, als_fit, em_impute
from .draws import McmcConfig
from .independent import run_indep
from .separable import run_sep
from .tensor import cp_reconstruct
from .validation import check_positive_int, check_same_pattern, check_seed, check_tensor


class TensorImputer(TransformerMixin, BaseEstimator):
    """Bayesian multiple imputation of a tensor with a CP model.

    Parameters
    ----------
    rank : int
    engine : {"independent", "correlated"}
        i.i.d. errors, or separable errors with per-mode covariances.
    n_iter, burn_in, n_chains, thin : int
        Gibbs settings; ``burn_in=None`` discards the first half.
    init : {"em", "random"}
    policies : tuple of str, optional
        Covariance policy per mode for the correlated engine.
    random_state : int, Generator or None
    n_jobs : int
        Chains run on up to this many threads.

    Attributes
    ----------
    result_ : ImputationResult
    draws_ : ImputationDraws
    convergence_ : ConvergenceReport or None
    """

    def __init__(self, rank=3, engine="independent", n_iter=1000, burn_in=None, n_chains=2,
                 thin=1, init="em", policies=None, random_state=None, n_jobs=1):
        self.rank = rank
        self.engine = engine
        self.n_iter = n_iter
        self.burn_in = burn_in
        self.n_chains = n_chains
        self.thin = thin
        self.init = init
        self.policies = policies
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self):
        return McmcConfig(
            n_iter=check_positive_int(self.n_iter, "n_iter"),
            burn_in=self.burn_in,
            n_chains=check_positive_int(self.n_chains, "n_chains"),
            thin=check_positive_int(self.thin, "thin"),
            seed=check_seed(self.random_state),
            init=self.init,
            n_jobs=self.n_jobs,
        )

    def fit(self, X, y=None):
        t = check_tensor(X)
        rank = check_positive_int(self.rank, "rank")
        cfg = self._config()
        if self.engine == "independent":
            res = run_indep(t, rank, cfg)
        elif self.engine == "correlated":
            res = run_sep(t, rank, cfg, self.policies)
        else:
            raise ValueError("engine must be 'independent' or 'correlated'")
        self.result_ = res
        self.draws_ = res.draws
        self.convergence_ = res.convergence
        self.shape_ = t.dims
        self.mask_ = t.mask
        return self

    def transform(self, X):
        """Fill the missing entries with their posterior means."""
        check_is_fitted(self, "draws_")
        t = check_tensor(X)
        check_same_pattern(t, self.shape_, self.mask_)
        return self.draws_.completed(t, self.draws_.mean)

    def sample(self, X):
        """Completed tensors, one per retained draw, shape ``(n_draws, *dims)``."""
        check_is_fitted(self, "draws_")
        t = check_tensor(X)
        check_same_pattern(t, self.shape_, self.mask_)
        return np.stack([self.draws_.completed(t, v) for v in self.draws_.pooled()])


class EMImputer(TransformerMixin, BaseEstimator):
    """Point imputation by EM with a rank-``rank`` CP model."""

    def __init__(self, rank=3, max_iter=200, tol=1e-6, inner_sweeps=5, random_state=None):
        self.rank = rank
        self.max_iter = max_iter
        self.tol = tol
        self.inner_sweeps = inner_sweeps
        self.random_state = random_state

    def fit(self, X, y=None):
        t = check_tensor(X)
        cfg = AlsConfig(rank=check_positive_int(self.rank, "rank"), seed=check_seed(self.random_state))
        res = em_impute(t, cfg, em_max_iter=check_positive_int(self.max_iter, "max_iter"),
                        em_tol=self.tol, inner_sweeps=check_positive_int(self.inner_sweeps, "inner_sweeps"))
        self.result_ = res
        self.model_ = res.model
        self.offset_ = res.offset
        self.converged_ = res.converged
        self.n_iter_ = res.n_iter
        self.completed_ = res.completed
        self.shape_ = t.dims
        self.mask_ = t.mask
        return self

    def transform(self, X):
        check_is_fitted(self, "completed_")
        t = check_tensor(X)
        check_same_pattern(t, self.shape_, self.mask_)
        out = np.array(t.values)
        out[t.mask] = self.completed_[t.mask]
        return out


class CPALS(TransformerMixin, BaseEstimator):
    """CP decomposition of a fully observed tensor by alternating least squares.

    ``transform`` returns the rank-``rank`` reconstruction.
    """

    def __init__(self, rank=3, max_iter=500, tol=1e-8, random_state=None):
        self.rank = rank
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        t = check_tensor(X, allow_missing=False)
        cfg = AlsConfig(rank=check_positive_int(self.rank, "rank"),
                        max_iter=check_positive_int(self.max_iter, "max_iter"),
                        rel_tol=self.tol, seed=check_seed(self.random_state))
        res = als_fit(t.values, cfg)
        self.model_ = res.model
        self.factors_ = res.model.factors
        self.weights_ = res.model.weights
        self.n_iter_ = res.n_iter
        self.converged_ = res.converged
        self.ssr_ = res.ssr
        self.shape_ = t.dims
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        t = check_tensor(X, allow_missing=False)
        if t.dims != self.shape_:
            raise ValueError("shape differs from the fitted tensor")
        return cp_reconstruct(self.model_)
