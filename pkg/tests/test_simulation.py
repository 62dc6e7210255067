import numpy as np
import pytest

from tensorimpute.distributions import rng_stream
from tensorimpute.draws import ImputationDraws, McmcConfig
from tensorimpute.simulation import (
    SimDesign,
    aggregate,
    compound_symmetry,
    entry_mask,
    evaluate_run,
    fiber_mask,
    fiber_predictors,
    gen_study1,
    gen_study2,
    gen_study3,
    generate,
    make_fiber_functional,
    replicate_seeds,
    run_replicates,
)
from tensorimpute.tensor import MaskedTensor


def test_entry_mask_proportion():
    m = entry_mask((50, 50, 40), 0.2, rng_stream(0))
    assert abs(m.mean() - 0.2) < 0.01


def test_fiber_mask_whole_fibers():
    m = fiber_mask((40, 50, 6), 0.3, 2, rng_stream(1))
    per_fiber = m.reshape(-1, 6)
    assert np.all(per_fiber.all(axis=1) | ~per_fiber.any(axis=1))
    assert abs(per_fiber[:, 0].mean() - 0.3) < 0.03
    m = fiber_mask((4, 5, 6), 0.5, 0, rng_stream(2))
    assert np.all(m.all(axis=0) | ~m.any(axis=0))


def test_design_validation():
    for bad in ({"study": 4}, {"prob": 0.0}, {"missing": "block"}, {"fiber_mode": 3}, {"study": 2, "dims": (4, 4)}):
        with pytest.raises(ValueError):
            SimDesign(**bad)


def test_seed_reproducibility():
    a = gen_study2(seed=5)
    b = gen_study2(seed=5)
    c = gen_study2(seed=6)
    np.testing.assert_array_equal(a.truth, b.truth)
    np.testing.assert_array_equal(a.data.mask, b.data.mask)
    assert not np.array_equal(a.truth, c.truth)


def test_data_matches_truth_on_observed():
    s = gen_study1(seed=3, missing="fiber", prob=0.3)
    obs = ~s.data.mask
    np.testing.assert_array_equal(s.data.values[obs], s.truth[obs])
    assert np.all(np.isnan(s.data.values[s.data.mask]))


def test_study2_covariances_pd():
    for seed in range(5):
        s = gen_study2(seed=seed)
        np.testing.assert_allclose(s.cov.matrices[0], 0.5 * np.eye(10))
        for k in (1, 2):
            m = s.cov.matrices[k]
            np.testing.assert_array_equal(m, m.T)
            assert np.linalg.eigvalsh(m).min() > 0


def test_study2_noise_covariance_monte_carlo():
    # pooled over subjects and replicates, the (j, k) noise covariance is 0.5 Σ_3 ⊗ Σ_2
    design = SimDesign(study=2, dims=(200, 3, 2), seed=0)
    s = generate(design)
    e = (s.truth - s.lowrank).reshape(200, -1, order="F")
    ref = np.kron(s.cov.matrices[2], s.cov.matrices[1]) * 0.5
    design = SimDesign(study=2, dims=(10_000, 3, 2), seed=0)
    s = generate(design)
    e = (s.truth - s.lowrank).reshape(10_000, -1, order="F")
    ref = np.kron(s.cov.matrices[2], s.cov.matrices[1]) * 0.5
    assert np.abs(np.cov(e.T) - ref).max() < 0.05 * np.abs(ref).max() + 0.02


def test_study3_spectrum():
    s = gen_study3(seed=0)
    np.testing.assert_allclose(s.cov.matrices[0], np.eye(10))
    np.testing.assert_allclose(s.cov.matrices[2], np.eye(10))
    ev = np.sort(np.linalg.eigvalsh(s.cov.matrices[1]))
    np.testing.assert_allclose(ev[:-1], 0.85)
    assert ev[-1] == pytest.approx(0.85 + 10 * 0.15)
    np.testing.assert_allclose(compound_symmetry(3, 0.5), [[1, .5, .5], [.5, 1, .5], [.5, .5, 1]])


def _calibrated(m=2000, d=1000, seed=0):
    rng = np.random.default_rng(seed)
    dims = (m, 1)
    mu = rng.standard_normal(m)
    truth = (mu + rng.standard_normal(m))[:, None]
    draws = mu[None, :] + rng.standard_normal((d, m))
    idx = np.column_stack([np.arange(m), np.zeros(m, int)])
    return truth, ImputationDraws(dims, idx, draws)


def test_evaluate_calibrated_gaussian():
    truth, draws = _calibrated()
    out = evaluate_run(truth, draws)
    assert abs(out["coverage"] - 95) < 2
    # (μ - x)^2 is χ²₁ with median 0.455
    assert abs(out["mse"] - 0.455) < 0.06
    assert not out["degenerate"]
    assert out["n_missing"] == 2000


def test_evaluate_order_invariant():
    truth, draws = _calibrated(m=200, d=300, seed=1)
    perm = np.random.default_rng(2).permutation(300)
    shuffled = ImputationDraws(draws.dims, draws.missing_index, draws.draws[:, perm])
    a, b = evaluate_run(truth, draws), evaluate_run(truth, shuffled)
    assert a["coverage"] == b["coverage"]
    assert a == pytest.approx(b, rel=1e-12)


def test_evaluate_degenerate():
    truth = np.arange(4.0).reshape(2, 2)
    idx = np.array([[0, 0], [1, 1]])
    draws = ImputationDraws((2, 2), idx, np.tile([[0.5, 3.0]], (5, 1)))
    out = evaluate_run(truth, draws)
    assert out["degenerate"]
    assert out["coverage"] == 50.0
    with pytest.raises(ValueError):
        evaluate_run(np.zeros((3, 2)), draws)


def test_fiber_predictors_brute_force():
    rng = np.random.default_rng(3)
    dims = (3, 4, 2)
    x = rng.standard_normal(dims)
    mask = rng.random(dims) < 0.3
    mask[0, :, 0] = True
    data = MaskedTensor(np.where(mask, np.nan, x), mask)
    idx = data.missing_index()
    d = rng.standard_normal((6, idx.shape[0]))
    draws = ImputationDraws(dims, idx, d)
    fun = make_fiber_functional(4, mode=1, n=5, seed=0)
    pred, fibers = fiber_predictors(fun, data, draws)
    assert pred.shape == (6, 5, fibers.size)
    for j, fid in enumerate(fibers):
        i, k = np.unravel_index(fid, (3, 2), order="F")
        for s in range(6):
            full = data.values.copy()
            full[tuple(idx.T)] = d[s]
            np.testing.assert_allclose(pred[s, :, j], fun.betas @ full[i, :, k], atol=1e-12)
    # every fiber with a missing entry appears
    assert fibers.size == len({(i, k) for i, _, k in idx})


def test_evaluate_fiber_metrics_present():
    truth, _ = _calibrated(m=10)
    s = gen_study3(dims=(4, 5, 3), seed=1)
    idx = s.data.missing_index()
    rng = np.random.default_rng(0)
    draws = ImputationDraws(s.data.dims, idx, s.truth[tuple(idx.T)] + rng.standard_normal((50, idx.shape[0])))
    out = evaluate_run(s.truth, draws, make_fiber_functional(5, mode=1, seed=2), s.data)
    assert out["n_fibers"] > 0 and 0 <= out["fiber_coverage"] <= 100
    with pytest.raises(ValueError):
        evaluate_run(s.truth, draws, make_fiber_functional(5, mode=1))


def test_replicate_seeds_distinct_and_stable():
    a = replicate_seeds(3, 10)
    assert a == replicate_seeds(3, 10)
    assert len(set(a)) == 10
    assert replicate_seeds(3, 4) == a[:4]


def test_run_replicates_and_aggregate():
    design = SimDesign(study=1, dims=(5, 5, 4), rank=2, seed=1)
    cfg = McmcConfig(n_iter=30, burn_in=15, seed=0)
    recs = run_replicates(design, ("independent", "em"), 2, cfg)
    again = run_replicates(design, ("independent", "em"), 2, cfg)
    assert len(recs) == 4
    assert [r.metrics for r in recs] == [r.metrics for r in again]
    summary = aggregate(recs)
    assert set(summary) == {"independent", "em"}
    assert summary["independent"]["replicates"] == 2 and summary["independent"]["failed"] == 0
    assert summary["independent"]["mse"] > 0


def test_run_replicates_records_failures():
    design = SimDesign(study=1, dims=(3, 3, 3), rank=1, seed=0)
    recs = run_replicates(design, ("bogus",), 1, McmcConfig(n_iter=10, burn_in=5))
    assert recs[0].error and "bogus" in recs[0].error
    assert aggregate(recs)["bogus"]["failed"] == 1
