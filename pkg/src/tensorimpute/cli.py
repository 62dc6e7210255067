"""Command-line entry point.

Subcommands: ``impute``, ``cv-rank``, ``simulate``, ``diversity`` and
``diagnostics``.  Any failure prints a JSON error object on stderr and exits
with a nonzero status.  Mode numbers and indices on the command line and in
files are 1-based.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path
from typing import Literal

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator
from threadpoolctl import threadpool_limits

from .cp import AlsConfig, em_impute
from .diversity import diagnostics, diversity_trend
from .draws import ImputationDraws, McmcConfig
from .independent import run_indep
from .io import (
    FORMAT_VERSION,
    read_descriptor,
    read_draws,
    read_tensor,
    write_draws,
    write_json,
    write_rows,
    write_summary,
    write_tensor,
)
from .selection import CvConfig, cv_select_rank
from .separable import run_sep
from .simulation import SimDesign, aggregate, generate, make_fiber_functional, run_replicates


class CliError(Exception):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class McmcSection(_Strict):
    iterations: int = Field(1000, ge=1)
    burn_in: int | None = Field(None, ge=0)
    chains: int = Field(2, ge=1)
    thin: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    init: Literal["em", "random"] = "em"


class CvSection(_Strict):
    k: int = Field(4, ge=2)
    unit: Literal["entry", "fiber"] = "entry"
    fiber_mode: int | None = Field(None, ge=1)
    seed: int = Field(0, ge=0)


class RunConfig(_Strict):
    """Validated run configuration (JSON or YAML); unknown keys are rejected."""

    engine: Literal["independent", "correlated", "em"] = "independent"
    rank: int | list[int] = 3
    mcmc: McmcSection = McmcSection()
    policies: list[Literal["identity", "scaled", "wishart"]] | None = None
    cv: CvSection = CvSection()
    output: str = "out"

    @field_validator("rank")
    @classmethod
    def _ranks_positive(cls, v):
        vals = v if isinstance(v, list) else [v]
        if not vals or min(vals) < 1:
            raise ValueError("ranks must be positive")
        return v

    def mcmc_config(self, threads=1):
        m = self.mcmc
        return McmcConfig(n_iter=m.iterations, burn_in=m.burn_in, n_chains=m.chains,
                          thin=m.thin, seed=m.seed, init=m.init, n_jobs=threads)


def load_config(path):
    if path is None:
        return RunConfig()
    text = Path(path).read_text(encoding="utf-8")
    raw = yaml.safe_load(text) if Path(path).suffix in (".yaml", ".yml") else json.loads(text)
    return RunConfig.model_validate(raw or {})


def _package_version():
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


def _outdir(args, cfg=None):
    out = Path(args.output or (cfg.output if cfg else "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _policies(cfg, ndim):
    return None if cfg.policies is None else tuple(cfg.policies)


# ---------------------------------------------------------------------------
# commands


def cmd_impute(args):
    cfg = load_config(args.config)
    if isinstance(cfg.rank, list):
        if len(cfg.rank) != 1:
            raise CliError("impute needs a single rank; use cv-rank to choose one")
        rank = cfg.rank[0]
    else:
        rank = cfg.rank
    t = read_tensor(args.input, args.descriptor)
    out = _outdir(args, cfg)
    mcmc = cfg.mcmc_config(args.threads)
    start = time.perf_counter()
    report = None
    if cfg.engine == "em":
        res = em_impute(t, AlsConfig(rank=rank, seed=cfg.mcmc.seed))
        idx = t.missing_index()
        draws = ImputationDraws(t.dims, idx, res.completed[tuple(idx.T)][None, None])
        conv = {"engine": "em", "converged": res.converged, "n_iter": res.n_iter}
    else:
        if cfg.engine == "independent":
            res = run_indep(t, rank, mcmc)
        else:
            res = run_sep(t, rank, mcmc, _policies(cfg, t.ndim))
        draws = res.draws
        report = res.convergence
        conv = {"engine": cfg.engine}
        conv.update(report.to_dict() if report else {"srf": {}, "converged": None})
    elapsed = time.perf_counter() - start
    write_draws(out / "draws.csv", draws)
    write_summary(out / "summary.csv", draws)
    write_json(out / "convergence.json", _jsonable(conv))
    manifest = {
        "format_version": FORMAT_VERSION,
        "command": "impute",
        "package_version": _package_version(),
        "input": str(args.input),
        "config": cfg.model_dump(),
        "rank": rank,
        "seeds": {"mcmc": cfg.mcmc.seed, "chain_streams": list(range(mcmc.n_chains))},
        "n_missing": t.n_missing,
        "wall_time_s": elapsed,
    }
    write_json(out / "manifest.json", manifest)
    return {"output": str(out), "n_missing": t.n_missing, "converged": None if report is None else report.converged}


def cmd_cv_rank(args):
    cfg = load_config(args.config)
    ranks = tuple(cfg.rank if isinstance(cfg.rank, list) else [cfg.rank])
    t = read_tensor(args.input, args.descriptor)
    out = _outdir(args, cfg)
    fiber_mode = None if cfg.cv.fiber_mode is None else cfg.cv.fiber_mode - 1
    cv = CvConfig(ranks=ranks, k=cfg.cv.k, unit=cfg.cv.unit, fiber_mode=fiber_mode, seed=cfg.cv.seed)
    res = cv_select_rank(t, cv, cfg.engine, cfg.mcmc_config(args.threads), _policies(cfg, t.ndim))
    write_rows(out / "cv_scores.csv", res.table(), ["rank", "fold", "sse"])
    summary = {
        "format_version": FORMAT_VERSION,
        "selected_rank": res.selected,
        "mean_sse": {str(r): (None if not np.isfinite(v) else float(v)) for r, v in zip(res.ranks, res.mean_scores)},
        "failures": {str(k): v for k, v in res.failures.items()},
        "config": cfg.model_dump(),
    }
    write_json(out / "cv.json", summary)
    return {"selected_rank": res.selected}


def _parse_dims(text):
    try:
        dims = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise CliError(f"bad --dims {text!r}") from None
    return dims


def cmd_simulate(args):
    design = SimDesign(
        study=args.study,
        dims=_parse_dims(args.dims),
        rank=args.rank,
        missing=args.missing,
        prob=args.prob,
        fiber_mode=args.fiber_mode - 1,
        sigma=args.sigma,
        seed=args.seed,
    )
    out = _outdir(args)
    sim = generate(design)
    names = ["mode1", "mode2", "mode3"][: len(design.dims)] if len(design.dims) <= 3 else None
    write_tensor(out / "truth.csv", sim.truth, mode_names=names)
    fiber_hint = design.fiber_mode + 1 if design.missing == "fiber" else None
    write_tensor(out / "data.csv", sim.data, mode_names=names, fiber_missing_mode=fiber_hint)
    covs = {
        "format_version": FORMAT_VERSION,
        "policies": list(sim.cov.policies),
        "matrices": [None if m is None else (m if isinstance(m, float) else np.asarray(m).tolist())
                     for m in sim.cov.matrices],
    }
    write_json(out / "covariance.json", covs)
    result = {"output": str(out), "n_missing": sim.data.n_missing}
    if args.replicates:
        engines = tuple(e.strip() for e in args.engines.split(","))
        mcmc = McmcConfig(n_iter=args.iterations, burn_in=args.burn_in, n_chains=args.chains,
                          seed=args.seed, n_jobs=args.threads)
        functional = None
        if args.functional_mode:
            mode = args.functional_mode - 1
            functional = make_fiber_functional(design.dims[mode], mode, 100, args.seed)
        records = run_replicates(design, engines, args.replicates, mcmc, functional)
        rows = []
        for r in records:
            row = {"replicate": r.replicate + 1, "engine": r.engine, "seed": r.seed, "error": r.error}
            row.update(r.metrics)
            rows.append(row)
        cols = ["replicate", "engine", "seed", "error"]
        cols += list(dict.fromkeys(k for r in records for k in r.metrics))
        write_rows(out / "metrics.csv", rows, cols)
        write_json(out / "metrics_summary.json", _jsonable({
            "format_version": FORMAT_VERSION,
            "design": design.__dict__,
            "engines": aggregate(records),
        }))
        result["engines"] = list(engines)
    return result


def cmd_diversity(args):
    t = read_tensor(args.input, args.descriptor)
    draws = read_draws(args.draws, t.dims) if args.draws else None
    trend = diversity_trend(t, args.method, args.time_mode - 1, args.taxa_mode - 1, draws,
                            level=args.level, verbatim=args.verbatim, seed=args.seed)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_rows(out, trend.rows(), ["time", "method", "point", "lower", "upper", "n_observed", "available"])
    return {"output": str(out), "unavailable": int((~trend.available).sum())}


def cmd_diagnostics(args):
    t = read_tensor(args.input, args.descriptor)
    out = _outdir(args)
    d = diagnostics(t, args.time_mode - 1, args.taxa_mode - 1, per_taxon=args.per_taxon)
    hist = [{"bin_lower": float(lo), "bin_upper": float(hi), "count": int(c)}
            for lo, hi, c in zip(d.edges[:-1], d.edges[1:], d.counts)]
    write_rows(out / "histogram.csv", hist, ["bin_lower", "bin_upper", "count"])
    rows = []
    for k, c in sorted(d.correlations.items()):
        for a in range(c.shape[0]):
            for b in range(c.shape[1]):
                v = c[a, b]
                rows.append({"time": k + 1, "taxon_a": a + 1, "taxon_b": b + 1,
                             "correlation": None if not np.isfinite(v) else float(v)})
    write_rows(out / "correlations.csv", rows, ["time", "taxon_a", "taxon_b", "correlation"])
    notice = {"format_version": FORMAT_VERSION, "below_range": d.below, "above_range": d.above,
              "skipped_times": [k + 1 for k in d.skipped]}
    write_json(out / "diagnostics.json", notice)
    return {"output": str(out), "skipped_times": notice["skipped_times"]}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(message)


def build_parser():
    p = _Parser(prog="tensorimpute", description="Bayesian CP tensor imputation")
    p.add_argument("--threads", type=int, default=1, help="cap on worker and BLAS threads")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def tensor_args(sp):
        sp.add_argument("--input", required=True, help="tensor CSV (i1,...,iN,value)")
        sp.add_argument("--descriptor", help="JSON descriptor (default: beside the input)")

    sp = sub.add_parser("impute", help="multiple imputation of the missing cells")
    tensor_args(sp)
    sp.add_argument("--config", help="run configuration (JSON or YAML)")
    sp.add_argument("--output", help="output directory (overrides the config)")
    sp.set_defaults(func=cmd_impute)

    sp = sub.add_parser("cv-rank", help="cross-validated rank selection")
    tensor_args(sp)
    sp.add_argument("--config", help="run configuration (JSON or YAML)")
    sp.add_argument("--output", help="output directory (overrides the config)")
    sp.set_defaults(func=cmd_cv_rank)

    sp = sub.add_parser("simulate", help="generate a synthetic design")
    sp.add_argument("--study", type=int, choices=(1, 2, 3), required=True)
    sp.add_argument("--dims", default="10,10,10")
    sp.add_argument("--missing", choices=("entry", "fiber"), default="entry")
    sp.add_argument("--prob", type=float, default=0.2)
    sp.add_argument("--fiber-mode", type=int, default=3, help="mode the dropped fibers run along")
    sp.add_argument("--rank", type=int, default=3)
    sp.add_argument("--sigma", type=float, default=1.0, help="error sd (study 1)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", default="sim")
    sp.add_argument("--replicates", type=int, default=0)
    sp.add_argument("--engines", default="independent,correlated,em")
    sp.add_argument("--iterations", type=int, default=600)
    sp.add_argument("--burn-in", type=int, default=300)
    sp.add_argument("--chains", type=int, default=2)
    sp.add_argument("--functional-mode", type=int, default=0,
                    help="evaluate random linear functionals of fibers along this mode")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("diversity", help="Shannon diversity trend with interval bounds")
    tensor_args(sp)
    sp.add_argument("--draws", help="draws file written by impute")
    sp.add_argument("--method", choices=("point", "observed", "mi"), required=True)
    sp.add_argument("--time-mode", type=int, required=True)
    sp.add_argument("--taxa-mode", type=int, required=True)
    sp.add_argument("--level", type=float, default=0.95)
    sp.add_argument("--verbatim", action="store_true", help="omit the sqrt(n) standard-error scaling")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--output", default="diversity.csv")
    sp.set_defaults(func=cmd_diversity)

    sp = sub.add_parser("diagnostics", help="normality histogram and taxa correlation tables")
    tensor_args(sp)
    sp.add_argument("--time-mode", type=int, required=True)
    sp.add_argument("--taxa-mode", type=int, required=True)
    sp.add_argument("--per-taxon", action="store_true")
    sp.add_argument("--output", default="diagnostics")
    sp.set_defaults(func=cmd_diagnostics)
    return p


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise CliError("--threads must be at least 1")
        with threadpool_limits(limits=args.threads):
            result = args.func(args)
    except Exception as exc:  # reported as JSON
        json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    json.dump(_jsonable(result), sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0
