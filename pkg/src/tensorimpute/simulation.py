"""Synthetic designs, evaluation metrics and a replicate runner.

Three generators share one recipe: rank-3 standard-normal factors, an
additive error tensor, then entrywise or fiberwise missingness.

* ``gen_study1``: i.i.d. ``N(0, sigma^2)`` errors.
* ``gen_study2``: separable errors, ``Σ_1 = 0.5 I`` and ``Σ_k = M_k M_k^T`` for
  the other modes, with ``M_k`` having 0.9 on the diagonal and ±0.3 elsewhere.
* ``gen_study3``: separable errors, compound-symmetric ``Σ_2`` (1 on the
  diagonal, 0.15 elsewhere), identity for the other modes.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .cp import AlsConfig, em_impute
from .distributions import rng_stream
from .draws import McmcConfig, quantile
from .independent import run_indep
from .separable import SeparableCovariance, run_sep
from .tensor import MaskedTensor, cp_reconstruct, CPModel, mode_product

STUDIES = (1, 2, 3)


@dataclass(frozen=True)
class SimDesign:
    """One simulation setting.

    ``fiber_mode`` is the 0-based mode the dropped fibers run along; the
    default drops mode-3 fibers, i.e. ``X[i, j, :]``.
    """

    study: int = 1
    dims: tuple = (10, 10, 10)
    rank: int = 3
    missing: str = "entry"
    prob: float = 0.2
    fiber_mode: int = 2
    sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if self.study not in STUDIES:
            raise ValueError(f"study must be one of {STUDIES}")
        if len(self.dims) != 3 and self.study != 1:
            raise ValueError("studies 2 and 3 are three-way designs")
        if self.missing not in ("entry", "fiber"):
            raise ValueError("missing must be 'entry' or 'fiber'")
        if not 0 < self.prob < 1:
            raise ValueError("missing probability must be in (0, 1)")
        if not 0 <= self.fiber_mode < len(self.dims):
            raise ValueError("fiber_mode out of range")
        if self.rank < 1:
            raise ValueError("rank must be at least 1")


@dataclass
class SimData:
    """Generated replicate: noisy truth, its low-rank part and the masked data."""

    truth: np.ndarray
    lowrank: np.ndarray
    data: MaskedTensor
    cov: SeparableCovariance | None
    factors: list
    design: SimDesign | None = None


def entry_mask(dims, prob, rng):
    return rng.random(dims) < prob


def fiber_mask(dims, prob, mode, rng):
    """Drop whole mode-``mode`` fibers, each with probability ``prob``."""
    other = tuple(1 if k == mode else d for k, d in enumerate(dims))
    drop = rng.random(other) < prob
    return np.broadcast_to(drop, dims).copy()


def _mask(design, rng):
    if design.missing == "entry":
        return entry_mask(design.dims, design.prob, rng)
    return fiber_mask(design.dims, design.prob, design.fiber_mode, rng)


def _factors(dims, rank, rng):
    return [rng.standard_normal((d, rank)) for d in dims]


def study2_covariances(dims, rng):
    """``Σ_1 = 0.5 I``; ``Σ_k = M M^T`` with ``M`` 0.9 on the diagonal, ±0.3 off it."""
    mats = [0.5 * np.eye(dims[0])]
    for d in dims[1:]:
        m = np.where(rng.random((d, d)) < 0.5, 0.3, -0.3)
        np.fill_diagonal(m, 0.9)
        mats.append(m @ m.T)
    return mats


def compound_symmetry(d, rho=0.15):
    return (1 - rho) * np.eye(d) + rho * np.ones((d, d))


def separable_noise(dims, mats, rng):
    """Draw ``E = Z ×_1 L_1 ×_2 L_2 ... `` with ``L_k L_k^T = Σ_k``."""
    e = rng.standard_normal(dims)
    for k, s in enumerate(mats):
        e = mode_product(e, np.linalg.cholesky(s), k)
    return e


def _assemble(design, factors, noise, mask, cov):
    low = cp_reconstruct(CPModel(tuple(factors)))
    truth = low + noise
    data = MaskedTensor(np.where(mask, np.nan, truth), mask)
    return SimData(truth, low, data, cov, factors, design)


def gen_study1(dims=(10, 10, 10), sigma=1.0, seed=0, missing="entry", prob=0.2, fiber_mode=2, rank=3):
    design = SimDesign(1, dims, rank, missing, prob, fiber_mode, sigma, seed)
    return generate(design)


def gen_study2(dims=(10, 10, 10), seed=0, missing="entry", prob=0.2, fiber_mode=2, rank=3):
    design = SimDesign(2, dims, rank, missing, prob, fiber_mode, 1.0, seed)
    return generate(design)


def gen_study3(dims=(10, 10, 10), seed=0, missing="entry", prob=0.2, fiber_mode=2, rank=3):
    design = SimDesign(3, dims, rank, missing, prob, fiber_mode, 1.0, seed)
    return generate(design)


def generate(design):
    """Generate one replicate of ``design``; fully determined by ``design.seed``."""
    rng = rng_stream(design.seed, design.study)
    dims = design.dims
    factors = _factors(dims, design.rank, rng)
    if design.study == 1:
        noise = design.sigma * rng.standard_normal(dims)
        cov = SeparableCovariance(dims, ("scaled",) + ("identity",) * (len(dims) - 1),
                                  [design.sigma**2] + [None] * (len(dims) - 1))
    else:
        if design.study == 2:
            mats = study2_covariances(dims, rng)
        else:
            mats = [np.eye(dims[0]), compound_symmetry(dims[1]), np.eye(dims[2])]
        noise = separable_noise(dims, mats, rng)
        cov = SeparableCovariance(dims, ("wishart",) * 3, mats)
    mask = _mask(design, rng)
    return _assemble(design, factors, noise, mask, cov)


# ---------------------------------------------------------------------------
# metrics


@dataclass(frozen=True)
class FiberFunctional:
    """Random linear predictors ``β_b^T x`` of mode-``mode`` fibers."""

    betas: np.ndarray
    mode: int

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        if b.ndim != 2 or not np.all(np.isfinite(b)):
            raise ValueError("betas must be a finite (n, length) array")
        b.setflags(write=False)
        object.__setattr__(self, "betas", b)


def make_fiber_functional(length, mode=1, n=100, seed=0):
    rng = rng_stream(seed, 7)
    return FiberFunctional(rng.standard_normal((n, length)), mode)


def _coverage(lo, hi, truth):
    return float(np.mean((lo <= truth) & (truth <= hi)) * 100)


def fiber_predictors(functional, data, draws):
    """Draw-wise linear predictors for every mode fiber holding a missing entry.

    Returns ``(pred, fibers)``: ``pred`` has shape ``(n_draws, n_betas,
    n_fibers)``; observed entries of each fiber are pinned to the data.
    """
    mode = functional.mode
    dims = data.dims
    if functional.betas.shape[1] != dims[mode]:
        raise ValueError("functional length does not match the fiber mode")
    idx = draws.missing_index
    other = [k for k in range(len(dims)) if k != mode]
    fid = np.ravel_multi_index(tuple(idx[:, other].T), tuple(dims[k] for k in other), order="F")
    fibers, inv = np.unique(fid, return_inverse=True)
    base_t = np.moveaxis(np.nan_to_num(data.values, nan=0.0), mode, -1)
    base_t = base_t.reshape(-1, dims[mode], order="F")[fibers]  # (F, L)
    base = base_t @ functional.betas.T  # (F, B)
    pooled = draws.pooled()  # (D, m)
    onehot = np.zeros((idx.shape[0], fibers.size))
    onehot[np.arange(idx.shape[0]), inv] = 1.0
    coef = functional.betas[:, idx[:, mode]]  # (B, m)
    pred = np.stack([(pooled * coef[b]) @ onehot for b in range(coef.shape[0])], axis=1)
    return pred + base.T[None], fibers


def evaluate_run(truth, draws, functional=None, data=None, level=0.95):
    """Metrics of one imputation run against the full truth tensor.

    Entrywise: median (and mean) squared error of the posterior mean over
    the missing entries, relative MSE (over the variance of the true missing
    values) and coverage of the central ``level`` interval.  With a fiber
    functional, the same for the linear predictors of every fiber holding a
    missing entry, averaged over the coefficient vectors.
    """
    truth = np.asarray(truth, dtype=float)
    if truth.shape != tuple(draws.dims):
        raise ValueError("truth does not match the imputed tensor")
    if data is not None and not np.array_equal(np.asarray(data.missing_index()), draws.missing_index):
        raise ValueError("draws do not cover the data's missing entries")
    tv = truth[tuple(draws.missing_index.T)]
    err = (draws.mean - tv) ** 2
    lo, hi = draws.interval(level)
    out = {
        "n_missing": int(tv.size),
        "mse": float(np.median(err)),
        "mse_mean": float(np.mean(err)),
        "rel_mse": float(np.sum(err) / max(np.sum((tv - tv.mean()) ** 2), 1e-300)),
        "coverage": _coverage(lo, hi, tv),
        "degenerate": bool(np.all(hi - lo == 0)),
    }
    if draws.lowrank is not None:
        low = draws.pooled_lowrank()
        lerr = (low.mean(axis=0) - tv) ** 2
        out["mse_lowrank"] = float(np.median(lerr))
        out["coverage_lowrank"] = _coverage(quantile(low, (1 - level) / 2), quantile(low, (1 + level) / 2), tv)
    if functional is not None:
        if data is None:
            raise ValueError("a fiber functional needs the observed data")
        pred, fibers = fiber_predictors(functional, data, draws)
        tfib = np.moveaxis(truth, functional.mode, -1).reshape(-1, truth.shape[functional.mode], order="F")
        ttrue = functional.betas @ tfib[fibers].T  # (B, F)
        a = (1 - level) / 2
        flo = quantile(pred, a, axis=0)
        fhi = quantile(pred, 1 - a, axis=0)
        ferr = (pred.mean(axis=0) - ttrue) ** 2
        out["n_fibers"] = int(fibers.size)
        out["fiber_mse"] = float(np.mean(np.median(ferr, axis=1)))
        out["fiber_coverage"] = float(np.mean(np.mean((flo <= ttrue) & (ttrue <= fhi), axis=1)) * 100)
    return out


# ---------------------------------------------------------------------------
# replicates

ENGINES = ("independent", "correlated", "em")


def run_engine(engine, data, rank, mcmc, policies=None):
    """Run one engine; returns the ImputationResult or EMResult."""
    if engine == "independent":
        return run_indep(data, rank, mcmc)
    if engine == "correlated":
        return run_sep(data, rank, mcmc, policies)
    if engine == "em":
        return em_impute(data, AlsConfig(rank=rank, seed=mcmc.seed))
    raise ValueError(f"unknown engine {engine!r}; expected one of {ENGINES}")


def _em_metrics(truth, data, res):
    idx = data.missing_index()
    tv = truth[tuple(idx.T)]
    err = (res.completed[tuple(idx.T)] - tv) ** 2
    return {
        "n_missing": int(tv.size),
        "mse": float(np.median(err)),
        "mse_mean": float(np.mean(err)),
        "rel_mse": float(np.sum(err) / max(np.sum((tv - tv.mean()) ** 2), 1e-300)),
        "converged": bool(res.converged),
    }


@dataclass
class ReplicateRecord:
    replicate: int
    engine: str
    seed: int
    metrics: dict
    elapsed: float
    error: str | None = None


def replicate_seeds(seed, n):
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint32)[0]) for s in ss.spawn(n)]


def run_replicates(design, engines=("independent",), n_replicates=20, mcmc=None,
                   functional=None, policies=None):
    """Generate ``n_replicates`` datasets from ``design`` and run each engine on each.

    Replicate ``r`` uses the ``r``-th child seed of ``design.seed`` both for the
    data and for the chains, so every record is reproducible on its own.
    """
    mcmc = mcmc or McmcConfig()
    records = []
    for r, s in enumerate(replicate_seeds(design.seed, n_replicates)):
        sim = generate(_with_seed(design, s))
        for engine in engines:
            cfg = _with_mcmc_seed(mcmc, s)
            start = time.perf_counter()
            try:
                res = run_engine(engine, sim.data, design.rank, cfg, policies)
            except Exception as exc:  # recorded, not fatal
                records.append(ReplicateRecord(r, engine, s, {}, time.perf_counter() - start, repr(exc)))
                continue
            if engine == "em":
                metrics = _em_metrics(sim.truth, sim.data, res)
            else:
                metrics = evaluate_run(sim.truth, res.draws, functional, sim.data)
                rep = res.convergence
                metrics["converged"] = None if rep is None else rep.converged
                metrics["max_srf"] = None if rep is None else rep.max_srf
            records.append(ReplicateRecord(r, engine, s, metrics, time.perf_counter() - start))
    return records


def _with_seed(design, seed):
    d = asdict(design)
    d["seed"] = seed
    return SimDesign(**d)


def _with_mcmc_seed(cfg, seed):
    d = asdict(cfg)
    d["seed"] = seed
    return McmcConfig(**d)


def aggregate(records):
    """Per-engine medians over replicates of every numeric metric.

    Also reports the converged proportion (percent) and failure count.
    """
    out = {}
    for engine in dict.fromkeys(r.engine for r in records):
        rows = [r for r in records if r.engine == engine]
        ok = [r for r in rows if r.error is None]
        summary = {"replicates": len(rows), "failed": len(rows) - len(ok)}
        keys = dict.fromkeys(k for r in ok for k, v in r.metrics.items()
                             if isinstance(v, (int, float)) and not isinstance(v, bool))
        for k in keys:
            vals = [r.metrics[k] for r in ok if r.metrics.get(k) is not None]
            vals = [v for v in vals if not (isinstance(v, float) and math.isnan(v))]
            summary[k] = float(np.median(vals)) if vals else None
        conv = [r.metrics.get("converged") for r in ok if r.metrics.get("converged") is not None]
        summary["converged_pct"] = float(100 * np.mean(conv)) if conv else None
        out[engine] = summary
    return out
