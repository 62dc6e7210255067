"""MCMC settings, multi-chain orchestration, and posterior draw summaries."""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .convergence import DEFAULT_THRESHOLD, convergence_report
from .distributions import rng_stream

MAX_MONITORED_ENTRIES = 100


@dataclass(frozen=True)
class McmcConfig:
    """Gibbs sampler settings.

    ``burn_in`` defaults to half of ``n_iter``; iterations ``burn_in + 1`` to
    ``n_iter`` are retained, every ``thin``-th one.
    """

    n_iter: int = 1000
    burn_in: int | None = None
    n_chains: int = 2
    thin: int = 1
    seed: int | None = None
    init: str = "em"
    n_jobs: int = 1
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if self.n_iter < 1:
            raise ValueError("n_iter must be positive")
        b = self.n_iter // 2 if self.burn_in is None else self.burn_in
        if not 0 <= b < self.n_iter:
            raise ValueError("burn_in must satisfy 0 <= burn_in < n_iter")
        object.__setattr__(self, "burn_in", int(b))
        if self.n_chains < 1:
            raise ValueError("n_chains must be at least 1")
        if self.thin < 1:
            raise ValueError("thin must be at least 1")
        if self.init not in ("em", "random"):
            raise ValueError("init must be 'em' or 'random'")

    @property
    def n_kept(self):
        return len(range(self.burn_in + 1, self.n_iter + 1, self.thin))

    def keep(self, iteration):
        return iteration > self.burn_in and (iteration - self.burn_in - 1) % self.thin == 0


def quantile(draws, q, axis=0):
    """Empirical quantile, inverse-CDF (nearest-rank, type 1) convention."""
    return np.quantile(draws, q, axis=axis, method="inverted_cdf")


@dataclass
class ImputationDraws:
    """Posterior draws for the missing entries of one tensor.

    Attributes
    ----------
    dims : tuple
    missing_index : ndarray, shape (m, N)
        0-based multi-indices, first-mode-fastest order.
    draws : ndarray, shape (n_chains, n_kept, m)
        Posterior predictive draws on the original scale.
    lowrank : ndarray, shape (n_chains, n_kept, m) or None
        Low-rank mean at each retained iteration, original scale.
    """

    dims: tuple
    missing_index: np.ndarray
    draws: np.ndarray
    lowrank: np.ndarray | None = None

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.missing_index = np.asarray(self.missing_index, dtype=int).reshape(-1, len(self.dims))
        self.draws = np.asarray(self.draws, dtype=float)
        if self.draws.ndim == 2:
            self.draws = self.draws[None]
        if self.draws.ndim != 3 or self.draws.shape[2] != self.missing_index.shape[0]:
            raise ValueError("draws must have shape (chains, draws, n_missing)")
        if self.lowrank is not None:
            self.lowrank = np.asarray(self.lowrank, dtype=float).reshape(self.draws.shape)

    @property
    def n_missing(self):
        return self.missing_index.shape[0]

    @property
    def n_chains(self):
        return self.draws.shape[0]

    def pooled(self):
        return self.draws.reshape(-1, self.n_missing)

    def pooled_lowrank(self):
        if self.lowrank is None:
            return None
        return self.lowrank.reshape(-1, self.n_missing)

    @property
    def mean(self):
        return self.pooled().mean(axis=0)

    @property
    def lowrank_mean(self):
        low = self.pooled_lowrank()
        return None if low is None else low.mean(axis=0)

    @property
    def sd(self):
        pooled = self.pooled()
        if pooled.shape[0] < 2:
            return np.zeros(self.n_missing)
        return pooled.std(axis=0, ddof=1)

    def interval(self, level=0.95):
        a = (1 - level) / 2
        pooled = self.pooled()
        return quantile(pooled, a), quantile(pooled, 1 - a)

    def summary(self):
        lo, hi = self.interval(0.95)
        return {"mean": self.mean, "sd": self.sd, "q025": lo, "q975": hi}

    def linear_positions(self):
        return np.ravel_multi_index(tuple(self.missing_index.T), self.dims, order="F")

    def completed(self, t, values):
        """``t`` with its missing entries set to ``values`` (one per missing entry)."""
        out = np.array(t.values)
        out[tuple(self.missing_index.T)] = values
        return out


@dataclass
class ChainOutput:
    draws: np.ndarray
    lowrank: np.ndarray
    traces: dict
    final_state: object
    flags: set = field(default_factory=set)
    moments: dict = field(default_factory=dict)


@dataclass
class ImputationResult:
    """Everything a Gibbs run produces."""

    draws: ImputationDraws
    convergence: object
    traces: list
    chains: list
    config: McmcConfig
    rank: int
    engine: str
    elapsed: float = 0.0
    extras: dict = field(default_factory=dict)

    @property
    def point_imputation(self):
        return self.draws.mean


def monitored_entries(n_missing, seed):
    """Seeded subset (at most 100) of missing-entry positions to monitor."""
    rng = rng_stream(seed, 2**31 - 1)
    k = min(MAX_MONITORED_ENTRIES, n_missing)
    return np.sort(rng.choice(n_missing, size=k, replace=False)) if k else np.array([], dtype=int)


def run_chains(t, rank, cfg, init_chain, step, extract, offset, engine, collect=None):
    """Run ``cfg.n_chains`` chains and collect draws and diagnostics.

    ``init_chain(rng)`` builds a state, ``step(state)`` advances it one sweep,
    ``extract(state)`` returns ``(predictive, lowrank, scalars)`` for the
    missing entries on the centered scale.  ``collect(state)``, if given,
    returns named arrays whose first and second moments over the retained
    iterations are accumulated per chain.
    """
    start = time.perf_counter()
    m = t.n_missing
    watch = monitored_entries(m, cfg.seed)

    def one_chain(c):
        rng = rng_stream(cfg.seed, c)
        state = init_chain(rng)
        draws = np.empty((cfg.n_kept, m))
        lowrank = np.empty((cfg.n_kept, m))
        scalars = {}
        moments = {}
        k = 0
        for it in range(1, cfg.n_iter + 1):
            state = step(state)
            if cfg.keep(it):
                pred, low, sc = extract(state)
                draws[k] = pred
                lowrank[k] = low
                for name, v in sc.items():
                    scalars.setdefault(name, np.empty(cfg.n_kept))[k] = v
                if collect is not None:
                    for name, v in collect(state).items():
                        acc = moments.setdefault(name, [0.0, 0.0])
                        acc[0] = acc[0] + v
                        acc[1] = acc[1] + v * v
                k += 1
        traces = dict(scalars)
        for j in watch:
            traces[f"x{j}"] = draws[:, j]
        moments = {name: (s1 / k, s2 / k) for name, (s1, s2) in moments.items()}
        return ChainOutput(
            draws + offset, lowrank + offset, traces, state,
            set(getattr(state, "flags", ())), moments,
        )

    if cfg.n_jobs and cfg.n_jobs > 1 and cfg.n_chains > 1:
        with ThreadPoolExecutor(max_workers=min(cfg.n_jobs, cfg.n_chains)) as ex:
            chains = list(ex.map(one_chain, range(cfg.n_chains)))
    else:
        chains = [one_chain(c) for c in range(cfg.n_chains)]

    draws = ImputationDraws(
        dims=t.dims,
        missing_index=t.missing_index(),
        draws=np.stack([c.draws for c in chains]),
        lowrank=np.stack([c.lowrank for c in chains]),
    )
    traces = [c.traces for c in chains]
    report = None
    if cfg.n_chains >= 2 and cfg.n_kept >= 2:
        report = convergence_report(traces, cfg.threshold)
    result = ImputationResult(
        draws=draws,
        convergence=report,
        traces=traces,
        chains=chains,
        config=cfg,
        rank=rank,
        engine=engine,
        elapsed=time.perf_counter() - start,
    )
    return result
