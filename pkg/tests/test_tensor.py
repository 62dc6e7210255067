import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tensorimpute.tensor import (
    CPModel,
    MaskedTensor,
    center_observed,
    cp_reconstruct,
    design_matrix,
    fold,
    hadamard,
    khatri_rao,
    khatri_rao_chain,
    kronecker,
    matricize,
    mode_product,
    uncenter,
)


def brute_unfold(t, n):
    """Entry (i_1..i_N) -> row i_n, column sum_{k != n} i_k J_k (0-based)."""
    dims = t.shape
    cols = int(np.prod(dims)) // dims[n]
    out = np.empty((dims[n], cols))
    for idx in itertools.product(*map(range, dims)):
        col, j = 0, 1
        for k in range(len(dims)):
            if k == n:
                continue
            col += idx[k] * j
            j *= dims[k]
        out[idx[n], col] = t[idx]
    return out


def test_matricize_2x2x2_rows():
    t = np.empty((2, 2, 2))
    for i, j, k in itertools.product(range(2), repeat=3):
        t[i, j, k] = 100 * (i + 1) + 10 * (j + 1) + (k + 1)
    np.testing.assert_array_equal(matricize(t, 0), [[111, 121, 112, 122], [211, 221, 212, 222]])


@pytest.mark.parametrize("n", [0, 1, 2])
def test_matricize_matches_index_formula(n):
    t = np.random.default_rng(0).standard_normal((3, 4, 2))
    np.testing.assert_array_equal(matricize(t, n), brute_unfold(t, n))


def test_matricize_rank_one():
    rng = np.random.default_rng(1)
    u, v, w = rng.standard_normal(3), rng.standard_normal(4), rng.standard_normal(2)
    t = np.einsum("i,j,k->ijk", u, v, w)
    np.testing.assert_allclose(matricize(t, 0), np.outer(u, np.kron(w, v)), atol=1e-14)


def test_matricize_bad_mode():
    with pytest.raises(ValueError):
        matricize(np.zeros((2, 2)), 2)
    with pytest.raises(ValueError):
        matricize(np.zeros((2, 2)), -1)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=5), st.data())
def test_fold_round_trip(dims, data):
    t = np.random.default_rng(len(dims)).standard_normal(dims)
    n = data.draw(st.integers(0, len(dims) - 1))
    np.testing.assert_array_equal(fold(matricize(t, n), n, dims), t)


def test_khatri_rao_examples():
    np.testing.assert_array_equal(khatri_rao([[1], [2]], [[3], [4]]), [[3], [4], [6], [8]])
    a = np.random.default_rng(2).standard_normal((3, 2))
    np.testing.assert_array_equal(khatri_rao(a, np.ones((1, 2))), a)


def test_khatri_rao_brute_force():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((2, 2))
    brute = np.column_stack([np.kron(a[:, r], b[:, r]) for r in range(2)])
    np.testing.assert_allclose(khatri_rao(a, b), brute, atol=1e-15)


def test_khatri_rao_mismatch():
    with pytest.raises(ValueError):
        khatri_rao(np.ones((2, 2)), np.ones((2, 3)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3))
def test_khatri_rao_associative(i, j, k, r):
    rng = np.random.default_rng(i * 100 + j * 10 + k)
    a, b, c = (rng.standard_normal((d, r)) for d in (i, j, k))
    np.testing.assert_allclose(khatri_rao(khatri_rao(a, b), c), khatri_rao(a, khatri_rao(b, c)), atol=1e-12)


def test_kronecker_and_hadamard():
    np.testing.assert_array_equal(kronecker(np.eye(2), np.eye(3)), np.eye(6))
    a = np.random.default_rng(4).standard_normal((3, 2))
    np.testing.assert_array_equal(hadamard(a, np.ones((3, 2))), a)
    rng = np.random.default_rng(5)
    A, B, C, D = (rng.standard_normal((2, 2)) for _ in range(4))
    np.testing.assert_allclose(kronecker(A, B) @ kronecker(C, D), kronecker(A @ C, B @ D), atol=1e-12)
    with pytest.raises(ValueError):
        hadamard(np.ones((2, 2)), np.ones((2, 3)))


def test_cp_reconstruct_rank_one():
    m = CPModel((np.array([[1.0], [2]]), np.array([[3.0], [4]]), np.array([[5.0], [6]])))
    t = cp_reconstruct(m)
    for i, j, k in itertools.product(range(2), repeat=3):
        assert t[i, j, k] == [1, 2][i] * [3, 4][j] * [5, 6][k]


def test_cp_model_rejects_rank_zero_and_nonfinite():
    with pytest.raises(ValueError):
        CPModel((np.zeros((2, 0)), np.zeros((3, 0))))
    with pytest.raises(ValueError):
        CPModel((np.array([[np.nan]]), np.array([[1.0]])))


@settings(max_examples=20, deadline=None)
@given(st.lists(st.integers(1, 5), min_size=2, max_size=4), st.integers(1, 4), st.integers(0, 10**6))
def test_unfolding_identity(dims, rank, seed):
    rng = np.random.default_rng(seed)
    m = CPModel(tuple(rng.standard_normal((d, rank)) for d in dims))
    t = cp_reconstruct(m)
    for n in range(len(dims)):
        lhs = matricize(t, n)
        rhs = m.factors[n] @ design_matrix(m.factors, n).T
        assert np.linalg.norm(lhs - rhs) <= 1e-10 * max(np.linalg.norm(lhs), 1e-300)


def test_design_matrix_is_reversed_chain():
    rng = np.random.default_rng(6)
    f = [rng.standard_normal((d, 2)) for d in (2, 3, 4)]
    np.testing.assert_allclose(design_matrix(f, 1), khatri_rao(f[2], f[0]))
    np.testing.assert_allclose(design_matrix(f, 0), khatri_rao_chain([f[2], f[1]]))


def test_normalized_form():
    rng = np.random.default_rng(7)
    m = CPModel(tuple(rng.standard_normal((d, 3)) for d in (4, 5, 6)))
    nm = m.normalized()
    for u in nm.factors:
        np.testing.assert_allclose(np.linalg.norm(u, axis=0), 1.0, atol=1e-12)
    full = cp_reconstruct(m)
    assert np.linalg.norm(cp_reconstruct(nm) - full) <= 1e-10 * np.linalg.norm(full)


@settings(max_examples=20, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_scale_moves_between_factors(c, seed):
    rng = np.random.default_rng(seed)
    u = [rng.standard_normal((d, 2)) for d in (3, 4, 2)]
    a = cp_reconstruct(CPModel(tuple(u)))
    b = cp_reconstruct(CPModel((u[0] * c, u[1] / c, u[2])))
    np.testing.assert_allclose(np.linalg.norm(a), np.linalg.norm(b), rtol=1e-12)


def test_mode_product_matches_unfolding():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((3, 4, 2))
    m = rng.standard_normal((5, 4))
    np.testing.assert_allclose(matricize(mode_product(x, m, 1), 1), m @ matricize(x, 1), atol=1e-12)


def test_masked_tensor_basics():
    x = np.arange(8.0).reshape(2, 2, 2)
    mask = np.zeros((2, 2, 2), bool)
    mask[1, 0, 1] = True
    t = MaskedTensor(x, mask)
    assert t.n_missing == 1 and t.n_observed == 7
    assert np.isnan(t.values[1, 0, 1])
    np.testing.assert_array_equal(t.missing_index(), [[1, 0, 1]])
    assert not t.values.flags.writeable
    with pytest.raises(ValueError):
        MaskedTensor(np.array([[np.inf, 1.0]]))
    with pytest.raises(ValueError):
        MaskedTensor(np.zeros((1,) * 9))


def test_masked_tensor_nan_means_missing():
    t = MaskedTensor(np.array([[1.0, np.nan], [3.0, 4.0]]))
    assert t.mask[0, 1] and t.n_missing == 1


def test_missing_index_first_mode_fastest():
    mask = np.zeros((2, 3), bool)
    mask[1, 0] = mask[0, 2] = mask[1, 1] = True
    t = MaskedTensor(np.where(mask, np.nan, 1.0), mask)
    np.testing.assert_array_equal(t.missing_index(), [[1, 0], [1, 1], [0, 2]])


def test_center_examples():
    t = MaskedTensor(np.array([1.0, 2.0, 3.0, np.nan]))
    c, mean = center_observed(t)
    assert mean == 2.0
    np.testing.assert_array_equal(c.values[:3], [-1, 0, 1])
    assert c.mask[3]
    c2, m2 = center_observed(MaskedTensor(np.array([-1.0, 0.0, 1.0])))
    assert m2 == 0.0
    np.testing.assert_array_equal(c2.values, [-1, 0, 1])


def test_center_round_trip():
    # subtracting then adding the mean is exact up to one rounding per entry;
    # the engines keep the original observed values, so nothing observed drifts
    x = np.random.default_rng(9).standard_normal((4, 5, 3)) * 7 + 3
    t = MaskedTensor(x)
    c, mean = center_observed(t)
    back = uncenter(c.values, mean)
    assert np.all(np.abs(back - x) <= 4 * np.spacing(np.abs(x) + abs(mean)))


def test_center_all_missing():
    with pytest.raises(ValueError):
        center_observed(MaskedTensor(np.array([np.nan, np.nan])))


def test_balance_columns_keeps_reconstruction():
    from tensorimpute.tensor import balance_columns

    rng = np.random.default_rng(21)
    f = [rng.standard_normal((d, 3)) * s for d, s in zip((4, 5, 6), (1e4, 1e-3, 7.0))]
    g = balance_columns(f)
    np.testing.assert_allclose(cp_reconstruct(CPModel(tuple(g))), cp_reconstruct(CPModel(tuple(f))), rtol=1e-12, atol=1e-12)
    norms = np.array([np.linalg.norm(u, axis=0) for u in g])
    np.testing.assert_allclose(norms, norms[:1].repeat(3, axis=0), rtol=1e-12)
    # a zero column leaves its component untouched
    f[1][:, 0] = 0.0
    g = balance_columns(f)
    np.testing.assert_array_equal(g[0][:, 0], f[0][:, 0])


def test_sweep_is_scale_equivariant():
    from tensorimpute.distributions import rng_stream
    from tensorimpute.independent import IndepChainState, step_indep
    from tensorimpute.tensor import balance_columns

    rng = np.random.default_rng(22)
    x = rng.standard_normal((4, 5, 3))
    f = [rng.standard_normal((d, 2)) for d in (4, 5, 3)]
    skew = [f[0] * 50.0, f[1] / 10.0, f[2] / 5.0]
    out = []
    for start in (skew, balance_columns(skew)):
        low = cp_reconstruct(CPModel(tuple(start)))
        s = IndepChainState(start, 1.0, x, np.zeros(x.shape, bool), rng_stream(3), 0, low)
        out.append(step_indep(s).lowrank)
    np.testing.assert_allclose(out[0], out[1], rtol=1e-8, atol=1e-10)
