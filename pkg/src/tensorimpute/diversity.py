"""Compositional transforms, Shannon diversity trends and data diagnostics.

The trend functions work on a three-way clr tensor with one subject mode, one
time mode and one taxa mode.  Three interval constructions are offered for
the mean diversity at each time point:

``point``
    impute at the posterior mean, then a t-interval over all subjects;
``observed``
    a t-interval over the subjects whose taxa fiber is fully observed;
``mi``
    for each posterior draw, form the subject mean plus a t-distributed
    multiple of its standard error, then take quantiles over draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special, stats

from .distributions import rng_stream
from .draws import quantile
from .tensor import MaskedTensor

METHODS = ("point", "observed", "mi")


def clr_transform(counts, pseudo=0.5):
    """Centered log-ratio of each column of a taxa x samples count matrix."""
    counts = np.asarray(counts, dtype=float)
    if not pseudo > 0:
        raise ValueError("pseudo-count must be positive")
    if np.any(counts < 0) or not np.all(np.isfinite(counts)):
        raise ValueError("counts must be finite and nonnegative")
    logp = np.log(counts + pseudo)
    logp -= np.log(np.sum(counts + pseudo, axis=0, keepdims=True))
    return logp - logp.mean(axis=0, keepdims=True)


def shannon_diversity(clr, axis=-1):
    """Shannon entropy of the composition ``softmax(clr)`` along ``axis``."""
    clr = np.asarray(clr, dtype=float)
    logp = clr - special.logsumexp(clr, axis=axis, keepdims=True)
    p = np.exp(logp)
    return -np.sum(p * logp, axis=axis)


@dataclass
class DiversityTrend:
    """Mean diversity per time point with interval bounds.

    ``available`` is False where the method cannot form an interval (for
    ``observed``, fewer than two fully observed subjects).
    """

    method: str
    level: float
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    n_observed: np.ndarray
    available: np.ndarray

    @property
    def half_width(self):
        return (self.upper - self.lower) / 2

    def rows(self):
        for k in range(self.point.size):
            yield {
                "time": k + 1,
                "method": self.method,
                "point": _na(self.point[k]),
                "lower": _na(self.lower[k]),
                "upper": _na(self.upper[k]),
                "n_observed": int(self.n_observed[k]),
                "available": bool(self.available[k]),
            }


def _na(v):
    return None if not np.isfinite(v) else float(v)


def _axes(ndim, time_mode, taxa_mode):
    if ndim != 3:
        raise ValueError("diversity trends need a three-way subject x time x taxa tensor")
    if time_mode == taxa_mode or not (0 <= time_mode < 3 and 0 <= taxa_mode < 3):
        raise ValueError("time and taxa modes must be distinct modes of the tensor")
    subject = ({0, 1, 2} - {time_mode, taxa_mode}).pop()
    return subject, time_mode, taxa_mode


def _diversity_grid(x, axes):
    """Subject x time Shannon diversities of a complete tensor."""
    subject, time, taxa = axes
    return shannon_diversity(np.transpose(x, (subject, time, taxa)), axis=-1)


def _t_interval(a, level):
    n = a.size
    m = float(np.mean(a))
    if n < 2:
        return m, math.nan, math.nan
    half = stats.t.ppf((1 + level) / 2, n - 1) * np.std(a, ddof=1) / math.sqrt(n)
    return m, m - half, m + half


def diversity_trend(data, method, time_mode, taxa_mode, draws=None, level=0.95,
                    verbatim=False, seed=0):
    """Mean Shannon diversity over subjects at each time point, with bounds.

    Parameters
    ----------
    data : MaskedTensor
        clr values; the remaining mode indexes subjects.
    method : {"point", "observed", "mi"}
    draws : ImputationDraws, optional
        Needed for ``point`` (when entries are missing) and ``mi``.
    verbatim : bool
        For ``mi``, scale the t draw by the raw standard deviation rather
        than by the standard error.
    seed : int
        Seed for the t draws of ``mi``.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    if not isinstance(data, MaskedTensor):
        data = MaskedTensor(data)
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    axes = _axes(data.ndim, time_mode, taxa_mode)
    subject, time, taxa = axes
    n_sub, n_time = data.dims[subject], data.dims[time]
    full_obs = ~np.transpose(data.mask, (subject, time, taxa)).any(axis=-1)  # (S, T)
    n_observed = full_obs.sum(axis=0)
    point = np.full(n_time, np.nan)
    lower = np.full(n_time, np.nan)
    upper = np.full(n_time, np.nan)
    needs_draws = method == "mi" or (method == "point" and data.n_missing)
    if needs_draws and draws is None:
        raise ValueError(f"method {method!r} needs posterior draws")
    if draws is not None and not np.array_equal(draws.missing_index, data.missing_index()):
        raise ValueError("draws do not match the data's missing entries")

    if method == "point":
        x = data.values if not data.n_missing else draws.completed(data, draws.mean)
        alpha = _diversity_grid(x, axes)
        for k in range(n_time):
            point[k], lower[k], upper[k] = _t_interval(alpha[:, k], level)
    elif method == "observed":
        alpha = _diversity_grid(np.nan_to_num(data.values), axes)
        for k in range(n_time):
            a = alpha[full_obs[:, k], k]
            if a.size:
                point[k], lower[k], upper[k] = _t_interval(a, level)
    else:
        pooled = draws.pooled()
        rng = rng_stream(seed, 11)
        tq = rng.standard_t(n_sub - 1, size=(pooled.shape[0], n_time)) if n_sub > 1 else np.zeros((pooled.shape[0], n_time))
        scale = 1.0 if verbatim else 1.0 / math.sqrt(n_sub)
        sim = np.empty((pooled.shape[0], n_time))
        means = np.empty_like(sim)
        for d, vals in enumerate(pooled):
            alpha = _diversity_grid(draws.completed(data, vals), axes)
            means[d] = alpha.mean(axis=0)
            sd = alpha.std(axis=0, ddof=1) if n_sub > 1 else np.zeros(n_time)
            sim[d] = means[d] + sd * scale * tq[d]
        a = (1 - level) / 2
        lower = quantile(sim, a)
        upper = quantile(sim, 1 - a)
        point = np.clip(means.mean(axis=0), lower, upper)
    available = np.isfinite(lower) & np.isfinite(upper)
    return DiversityTrend(method, level, point, lower, upper, n_observed, available)


def shannon_draws(data, draws, taxa_mode):
    """Shannon diversity of every taxa fiber holding a missing entry, per draw.

    Returns ``(fibers, values)``: ``fibers`` lists the 0-based multi-indices
    of the fibers over the remaining modes, and ``values`` has shape
    ``(n_draws, n_fibers)``.
    """
    if not isinstance(data, MaskedTensor):
        data = MaskedTensor(data)
    if not np.array_equal(draws.missing_index, data.missing_index()):
        raise ValueError("draws do not match the data's missing entries")
    hit = np.moveaxis(data.mask, taxa_mode, -1).any(axis=-1)
    fibers = np.argwhere(hit)
    out = np.empty((draws.pooled().shape[0], fibers.shape[0]))
    for d, vals in enumerate(draws.pooled()):
        x = np.moveaxis(draws.completed(data, vals), taxa_mode, -1)
        out[d] = shannon_diversity(x[hit], axis=-1)
    return fibers, out


# ---------------------------------------------------------------------------
# diagnostics


@dataclass
class Diagnostics:
    edges: np.ndarray
    counts: np.ndarray
    below: int
    above: int
    correlations: dict  # time index -> taxa x taxa matrix (NaN where undefined)
    skipped: list


def standardized_values(data, taxa_mode=None, per_taxon=False):
    """Observed entries standardized globally, or per taxon when ``per_taxon``."""
    if not isinstance(data, MaskedTensor):
        data = MaskedTensor(data)
    x = data.values
    if not per_taxon:
        obs = x[~data.mask]
        return (obs - obs.mean()) / obs.std(ddof=1)
    if taxa_mode is None:
        raise ValueError("per-taxon standardization needs the taxa mode")
    xt = np.moveaxis(x, taxa_mode, 0).reshape(x.shape[taxa_mode], -1)
    mu = np.nanmean(xt, axis=1, keepdims=True)
    sd = np.nanstd(xt, axis=1, ddof=1, keepdims=True)
    z = (xt - mu) / np.where(sd > 0, sd, np.nan)
    return z[np.isfinite(z)]


def diagnostics(data, time_mode, taxa_mode, bins=None, per_taxon=False):
    """Histogram of standardized observed values and per-time taxa correlations.

    Correlations at time ``k`` are pairwise: each taxa pair uses the subjects
    observed at both.  Time points where no pair has two such subjects are
    skipped and listed in ``skipped``.
    """
    if not isinstance(data, MaskedTensor):
        data = MaskedTensor(data)
    subject, time, taxa = _axes(data.ndim, time_mode, taxa_mode)
    edges = np.linspace(-4, 4, 33) if bins is None else np.asarray(bins, dtype=float)
    z = standardized_values(data, taxa_mode, per_taxon)
    counts, _ = np.histogram(z, edges)
    below = int(np.sum(z < edges[0]))
    above = int(np.sum(z > edges[-1]))
    x = np.transpose(data.values, (subject, time, taxa))
    m = np.transpose(data.mask, (subject, time, taxa))
    corr = {}
    skipped = []
    for k in range(x.shape[1]):
        c = pairwise_correlation(x[:, k], m[:, k])
        if np.all(np.isnan(c)):
            skipped.append(k)
            continue
        corr[k] = c
    return Diagnostics(edges, counts, below, above, corr, skipped)


def pairwise_correlation(x, missing):
    """Column correlations of ``x`` using, per pair, the rows where both are observed.

    Pairs with fewer than two shared rows or zero variance are NaN.
    """
    obs = (~missing).astype(float)
    x0 = np.where(missing, 0.0, x)
    n = obs.T @ obs
    sa = x0.T @ obs  # sa[a, b]: sum of column a over rows where b is observed
    saa = (x0 * x0).T @ obs
    sab = x0.T @ x0
    with np.errstate(invalid="ignore", divide="ignore"):
        cov = sab - sa * sa.T / n
        va = saa - sa * sa / n
        c = cov / np.sqrt(va * va.T)
    c[(n < 2) | ~np.isfinite(c)] = np.nan
    # constant-column pairs come out as tiny-denominator noise; treat as undefined
    tol = 1e-12 * np.maximum(saa, saa.T).clip(min=1.0)
    c[(va <= tol) | (va.T <= tol)] = np.nan
    return np.clip(c, -1.0, 1.0)
