"""Cross-validated choice of the CP rank.

Observed entries (or whole observed fibers) are split into ``K`` folds.  For
each candidate rank and fold the engine is fitted with the fold hidden, the
held-out values are predicted, and the fold score is the sum of squared
prediction errors.  The rank with the smallest mean score wins; ties go to
the smaller rank.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cp import AlsConfig, em_impute
from .distributions import rng_stream
from .draws import McmcConfig
from .independent import run_indep
from .separable import run_sep
from .tensor import MaskedTensor

CV_ENGINES = ("independent", "correlated", "em")


@dataclass(frozen=True)
class CvConfig:
    """Cross-validation settings.

    ``unit`` is ``"entry"`` or ``"fiber"``; with fibers, ``fiber_mode`` is
    the 0-based mode the held-out fibers run along.
    """

    ranks: tuple = (1, 2, 3, 4)
    k: int = 4
    unit: str = "entry"
    fiber_mode: int | None = None
    seed: int = 0

    def __post_init__(self):
        ranks = tuple(int(r) for r in np.atleast_1d(self.ranks))
        object.__setattr__(self, "ranks", ranks)
        if not ranks:
            raise ValueError("need at least one candidate rank")
        if min(ranks) < 1:
            raise ValueError("candidate ranks must be at least 1")
        if self.k < 2:
            raise ValueError("need at least two folds")
        if self.unit not in ("entry", "fiber"):
            raise ValueError("unit must be 'entry' or 'fiber'")
        if self.unit == "fiber" and self.fiber_mode is None:
            raise ValueError("fiber holdout needs fiber_mode")


@dataclass
class CvResult:
    selected: int
    ranks: tuple
    scores: np.ndarray  # (n_ranks, K), NaN where a rank failed
    failures: dict = field(default_factory=dict)

    @property
    def mean_scores(self):
        return self.scores.mean(axis=1)

    def table(self):
        rows = []
        for i, r in enumerate(self.ranks):
            for f in range(self.scores.shape[1]):
                rows.append({"rank": r, "fold": f + 1, "sse": _na(self.scores[i, f])})
        return rows


def _na(v):
    return None if not np.isfinite(v) else float(v)


def assign_folds(t, cfg):
    """Fold label per entry (``-1`` for missing entries), first-mode-fastest order."""
    mask = t.mask
    rng = rng_stream(cfg.seed, 0xF01D)
    labels = np.full(t.size, -1)
    observed = np.flatnonzero(~mask.ravel(order="F"))
    if cfg.unit == "entry":
        perm = rng.permutation(observed)
        for f, part in enumerate(np.array_split(perm, cfg.k)):
            labels[part] = f
    else:
        mode = cfg.fiber_mode
        if not 0 <= mode < t.ndim:
            raise ValueError("fiber_mode out of range")
        idx = np.unravel_index(observed, t.dims, order="F")
        other = [k for k in range(t.ndim) if k != mode]
        fid = np.ravel_multi_index(tuple(idx[k] for k in other), tuple(t.dims[k] for k in other), order="F")
        fibers = np.unique(fid)
        perm = rng.permutation(fibers)
        fold_of = {}
        for f, part in enumerate(np.array_split(perm, cfg.k)):
            for v in part:
                fold_of[int(v)] = f
        labels[observed] = [fold_of[int(v)] for v in fid]
    counts = np.bincount(labels[labels >= 0], minlength=cfg.k)
    if np.any(counts == 0):
        raise ValueError(f"fold {int(np.argmin(counts)) + 1} has no held-out entries")
    if np.any(counts == observed.size):
        raise ValueError("a fold holds out every observed entry")
    return labels.reshape(t.dims, order="F")


def training_tensor(t, heldout):
    """``t`` with the ``heldout`` entries also marked missing."""
    return MaskedTensor(t.values, t.mask | heldout)


def _predict(engine, train, rank, mcmc, policies):
    if engine == "em":
        res = em_impute(train, AlsConfig(rank=rank, seed=mcmc.seed))
        return res.completed
    if engine == "independent":
        res = run_indep(train, rank, mcmc)
    elif engine == "correlated":
        res = run_sep(train, rank, mcmc, policies)
    else:
        raise ValueError(f"engine must be one of {CV_ENGINES}")
    return res.draws.completed(train, res.draws.mean)


def cv_select_rank(t, cfg=None, engine="independent", mcmc=None, policies=None):
    """Pick the rank with the smallest mean held-out sum of squared errors.

    An engine failure on any fold drops that rank, recording the error in
    ``failures``.  Each fit is seeded from ``(cfg.seed, rank, fold)``.
    """
    cfg = cfg or CvConfig()
    mcmc = mcmc or McmcConfig()
    if engine not in CV_ENGINES:
        raise ValueError(f"engine must be one of {CV_ENGINES}")
    if not isinstance(t, MaskedTensor):
        t = MaskedTensor(t)
    if len(cfg.ranks) == 1:
        return CvResult(cfg.ranks[0], cfg.ranks, np.full((1, cfg.k), np.nan))
    labels = assign_folds(t, cfg)
    scores = np.full((len(cfg.ranks), cfg.k), np.nan)
    failures = {}
    for i, rank in enumerate(cfg.ranks):
        for f in range(cfg.k):
            held = labels == f
            seed = int(rng_stream(cfg.seed, rank, f).integers(2**63))
            run_cfg = McmcConfig(**{**mcmc.__dict__, "seed": seed})
            try:
                pred = _predict(engine, training_tensor(t, held), rank, run_cfg, policies)
            except Exception as exc:  # recorded per rank
                failures[rank] = f"fold {f + 1}: {exc!r}"
                scores[i] = np.nan
                break
            scores[i, f] = float(np.sum((pred[held] - t.values[held]) ** 2))
    means = scores.mean(axis=1)
    if np.all(np.isnan(means)):
        raise RuntimeError(f"every candidate rank failed: {failures}")
    finite = [j for j in range(len(cfg.ranks)) if not math.isnan(means[j])]
    # ties go to the smaller rank
    best = min(finite, key=lambda j: (means[j], cfg.ranks[j]))
    return CvResult(cfg.ranks[best], cfg.ranks, scores, failures)
