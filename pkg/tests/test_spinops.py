import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st

from hds.spinops import (SIGMA, OperatorMatrix, TensorLayout, basis_state, embed, kron_states,
                         ladder, number_op, pauli_string)

AXES = ("x", "y", "z")


def kron_oracle(*mats):
    out = np.eye(1)
    for m in mats:
        out = np.kron(out, m)
    return out


def test_embed_single_factor_is_identity_map():
    op = embed(SIGMA["z"], 0, TensorLayout(1))
    assert np.array_equal(op.toarray(), SIGMA["z"])


def test_embed_second_site():
    op = embed(SIGMA["x"], 1, TensorLayout(2))
    assert np.array_equal(op.toarray(), kron_oracle(np.eye(2), SIGMA["x"]))


def test_zz_product_is_diagonal():
    lay = TensorLayout(2)
    zz = embed(SIGMA["z"], 0, lay) @ embed(SIGMA["z"], 1, lay)
    assert np.array_equal(zz.toarray(), np.diag([1, -1, -1, 1]))
    assert np.array_equal(pauli_string([(0, "z"), (1, "z")], lay).toarray(), np.diag([1, -1, -1, 1]))


def test_empty_string_is_identity_and_involution():
    lay = TensorLayout(3)
    assert np.array_equal(pauli_string([], lay).toarray(), np.eye(8))
    x = pauli_string([(0, "x")], lay)
    assert np.allclose((x @ x).toarray(), np.eye(8))


def test_boson_factor_last():
    lay = TensorLayout(1, boson_dim=3)
    assert lay.dim == 6
    b = embed(ladder("lower", 3).toarray(), 1, lay)
    assert np.allclose(b.toarray(), np.kron(np.eye(2), ladder("lower", 3).toarray()))


def test_errors():
    with pytest.raises(IndexError):
        embed(SIGMA["x"], 2, TensorLayout(2))
    with pytest.raises(ValueError):
        embed(np.eye(3), 0, TensorLayout(2))
    with pytest.raises(ValueError):
        pauli_string([(0, "x"), (0, "z")], TensorLayout(2))
    with pytest.raises(ValueError):
        ladder("lower", 1)
    with pytest.raises(ValueError):
        TensorLayout(4, ((0, 1), (1, 2)))
    with pytest.raises(ValueError):
        OperatorMatrix(np.array([[0, 1], [0, 0]]), hermitian=True)


def test_ladder_actions():
    b = ladder("lower", 4).toarray()
    bd = ladder("raise", 4).toarray()
    vac = np.eye(4)[0]
    assert np.allclose(b @ vac, 0)
    assert np.allclose(bd @ vac, np.eye(4)[1])
    comm = b @ bd - bd @ b
    assert np.allclose(comm[:3, :3], np.eye(3))
    assert np.allclose(bd[2, 1], np.sqrt(2))
    assert np.allclose(np.diag(number_op(4)), [0, 1, 2, 3])


def test_dense_below_threshold_sparse_above():
    small = pauli_string([(0, "x")], TensorLayout(7))
    big = pauli_string([(0, "x")], TensorLayout(8))
    assert not small.is_sparse
    assert big.is_sparse
    assert np.max(np.abs(big.toarray() - kron_oracle(SIGMA["x"], np.eye(128)))) < 1e-14


def test_basis_states():
    assert np.array_equal(basis_state([0, 1]), [0, 1, 0, 0])
    up = np.array([1, 0])
    assert np.array_equal(kron_states(up, up), [1, 0, 0, 0])


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(AXES), st.sampled_from(AXES), st.integers(1, 4), st.data())
def test_same_site_anticommute(a, b, n, data):
    site = data.draw(st.integers(0, n - 1))
    lay = TensorLayout(n)
    A = pauli_string([(site, a)], lay).toarray()
    B = pauli_string([(site, b)], lay).toarray()
    anti = A @ B + B @ A
    if a == b:
        assert np.allclose(anti, 2 * np.eye(lay.dim))
    else:
        assert np.max(np.abs(anti)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(AXES), st.sampled_from(AXES), st.integers(2, 4), st.data())
def test_distinct_sites_commute(a, b, n, data):
    i = data.draw(st.integers(0, n - 1))
    j = data.draw(st.integers(0, n - 1).filter(lambda k: k != i))
    lay = TensorLayout(n)
    A, B = embed(SIGMA[a], i, lay).toarray(), embed(SIGMA[b], j, lay).toarray()
    assert np.max(np.abs(A @ B - B @ A)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 8), st.sampled_from(AXES)), max_size=4, unique_by=lambda p: p[0]))
def test_pauli_strings_hermitian_and_sparse_dense_agree(spec):
    lay = TensorLayout(9)
    op = pauli_string(spec, lay)
    assert op.hermitian_error() < 1e-12
    dense = OperatorMatrix(op.toarray())
    assert np.max(np.abs(sp.csr_array(dense.toarray()) - op.tosparse())) < 1e-14
