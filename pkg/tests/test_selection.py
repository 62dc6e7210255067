import numpy as np
import pytest

import tensorimpute.selection as sel
from tensorimpute.draws import McmcConfig
from tensorimpute.selection import CvConfig, assign_folds, cv_select_rank, training_tensor
from tensorimpute.tensor import CPModel, MaskedTensor, cp_reconstruct


def data(dims=(6, 5, 4), prob=0.2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(dims)
    mask = rng.random(dims) < prob
    return MaskedTensor(np.where(mask, np.nan, x), mask)


def test_config_validation():
    for bad in ({"ranks": ()}, {"ranks": (0, 1)}, {"k": 1}, {"unit": "slab"}, {"unit": "fiber"}):
        with pytest.raises(ValueError):
            CvConfig(**bad)


def test_entry_folds_partition_observed():
    t = data()
    labels = assign_folds(t, CvConfig(k=4, seed=1))
    np.testing.assert_array_equal(labels[t.mask], -1)
    counts = np.bincount(labels[~t.mask])
    assert counts.size == 4 and counts.max() - counts.min() <= 1
    np.testing.assert_array_equal(labels, assign_folds(t, CvConfig(k=4, seed=1)))


@pytest.mark.parametrize("mode", [0, 1, 2])
def test_fiber_folds_keep_fibers_whole(mode):
    t = data(seed=mode)
    labels = assign_folds(t, CvConfig(unit="fiber", fiber_mode=mode, k=3))
    fib = np.moveaxis(labels, mode, -1).reshape(-1, t.dims[mode])
    for row in fib:
        vals = set(row[row >= 0])
        assert len(vals) <= 1
    assert set(np.unique(labels[~t.mask])) == {0, 1, 2}


def test_too_few_units():
    t = MaskedTensor(np.ones((2, 1, 1)))
    with pytest.raises(ValueError):
        assign_folds(t, CvConfig(k=4))
    with pytest.raises(ValueError):
        assign_folds(data(), CvConfig(unit="fiber", fiber_mode=5))


def test_training_tensor_adds_heldout():
    t = data()
    held = assign_folds(t, CvConfig()) == 0
    tr = training_tensor(t, held)
    np.testing.assert_array_equal(tr.mask, t.mask | held)


def test_single_candidate_skips_fitting(monkeypatch):
    monkeypatch.setattr(sel, "_predict", lambda *a: pytest.fail("no fit expected"))
    assert cv_select_rank(data(), CvConfig(ranks=(3,))).selected == 3


def test_failed_rank_is_recorded(monkeypatch):
    t = data()

    def fake(engine, train, rank, mcmc, policies):
        if rank == 2:
            raise np.linalg.LinAlgError("poisoned")
        return np.where(train.mask, 0.0, train.values) + rank
    monkeypatch.setattr(sel, "_predict", fake)
    res = cv_select_rank(t, CvConfig(ranks=(1, 2, 3)))
    assert 2 in res.failures and "poisoned" in res.failures[2]
    assert np.all(np.isnan(res.scores[1]))
    assert res.selected == 1
    assert any(r["sse"] is None for r in res.table())


def test_ties_go_to_smaller_rank(monkeypatch):
    monkeypatch.setattr(sel, "_predict", lambda e, train, *a: np.zeros(train.dims))
    assert cv_select_rank(data(), CvConfig(ranks=(4, 2, 3))).selected == 2


def test_all_fail(monkeypatch):
    def boom(*a):
        raise RuntimeError("x")
    monkeypatch.setattr(sel, "_predict", boom)
    with pytest.raises(RuntimeError):
        cv_select_rank(data(), CvConfig(ranks=(1, 2)))


def test_scores_are_heldout_sse():
    t = data(seed=3)
    res = cv_select_rank(t, CvConfig(ranks=(1, 2), k=3, seed=2), engine="em")
    assert res.scores.shape == (2, 3)
    assert np.all(res.scores > 0)
    assert res.selected in (1, 2)


def test_recovers_rank_with_independent_engine():
    rng = np.random.default_rng(11)
    dims = (8, 8, 8)
    x = cp_reconstruct(CPModel(tuple(rng.standard_normal((d, 2)) for d in dims))) + 0.1 * rng.standard_normal(dims)
    res = cv_select_rank(MaskedTensor(x), CvConfig(ranks=(1, 2, 3), seed=1),
                         mcmc=McmcConfig(n_iter=120, burn_in=60, n_chains=1))
    assert res.selected == 2
