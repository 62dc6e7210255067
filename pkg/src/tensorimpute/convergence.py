"""Composite scale reduction factor and effective sample size for MCMC chains."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_THRESHOLD = 1.1


def srf(chain1, chain2, *more):
    """Composite scale reduction factor.

    Pooled-sample variance over the mean within-chain variance.  For two
    chains this is

        2 * sum_i (X_i - X̄)^2 / (n1 + n2 - 1)
        / [sum (X_1i - X̄_1)^2 / (n1 - 1) + sum (X_2i - X̄_2)^2 / (n2 - 1)]

    Returns NaN when any chain has zero variance (a degenerate monitor).
    """
    chains = [np.asarray(c, dtype=float).ravel() for c in (chain1, chain2) + more]
    if any(c.size < 2 for c in chains):
        raise ValueError("every chain needs at least two draws")
    within = [np.var(c, ddof=1) for c in chains]
    if any(w == 0 for w in within):
        return math.nan
    pooled = np.var(np.concatenate(chains), ddof=1)
    return float(len(chains) * pooled / sum(within))


def effective_sample_size(chains):
    """Multi-chain effective sample size of a scalar quantity.

    ``chains`` has shape ``(n_chains, n_draws)``.  Autocorrelations are
    combined across chains against the pooled variance estimate and summed
    in adjacent pairs until a pair turns negative (Geyer's initial positive
    sequence, made monotone).  Returns NaN for a constant quantity.
    """
    x = np.atleast_2d(np.asarray(chains, dtype=float))
    m, n = x.shape
    if n < 4:
        raise ValueError("need at least four draws per chain")
    xc = x - x.mean(axis=1, keepdims=True)
    f = np.fft.rfft(xc, 2 * n, axis=1)
    acov = np.fft.irfft(f * np.conj(f), axis=1)[:, :n] / n
    within = np.mean(acov[:, 0] * n / (n - 1))
    var_plus = within * (n - 1) / n + (np.var(x.mean(axis=1), ddof=1) if m > 1 else 0.0)
    if var_plus <= 0:
        return math.nan
    rho = 1.0 - (within - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    pairs = rho[: n - n % 2].reshape(-1, 2).sum(axis=1)
    stop = np.flatnonzero(pairs < 0)
    pairs = pairs[: stop[0] if stop.size else pairs.size]
    pairs = np.minimum.accumulate(pairs)
    tau = max(-1.0 + 2.0 * pairs.sum(), 1.0 / math.log10(m * n + 10))
    return float(m * n / tau)


@dataclass
class ConvergenceReport:
    values: dict
    threshold: float = DEFAULT_THRESHOLD
    roster: list = field(default_factory=list)

    @property
    def degenerate(self):
        return [k for k, v in self.values.items() if math.isnan(v)]

    @property
    def max_srf(self):
        finite = [v for v in self.values.values() if not math.isnan(v)]
        return max(finite) if finite else math.nan

    @property
    def converged(self):
        m = self.max_srf
        return bool(not math.isnan(m) and m < self.threshold)

    def to_dict(self):
        return {
            "srf": {k: (None if math.isnan(v) else v) for k, v in self.values.items()},
            "max_srf": None if math.isnan(self.max_srf) else self.max_srf,
            "threshold": self.threshold,
            "converged": self.converged,
            "degenerate": self.degenerate,
        }


def convergence_report(traces, threshold=DEFAULT_THRESHOLD):
    """SRF for every monitored scalar shared by all chains.

    Parameters
    ----------
    traces : list of dict
        One mapping ``name -> 1-D array of retained draws`` per chain.
    threshold : float
        Monitors are converged when their SRF is below this value.
    """
    if len(traces) < 2:
        raise ValueError("convergence needs at least two chains")
    names = list(traces[0])
    values = {}
    for name in names:
        values[name] = srf(*[t[name] for t in traces])
    return ConvergenceReport(values=values, threshold=threshold, roster=names)
