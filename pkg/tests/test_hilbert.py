import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wgqed.errors import DegenerateStateError, ParameterError
from wgqed.hilbert import (
    StateVector,
    basis_state,
    collective_lowering,
    enumerate_basis,
    ground_state,
    number_operator,
    site_lowering,
    site_raising,
    state_from_polynomial,
    total_number,
)


@pytest.mark.parametrize(
    "args, dim", [((2, 2, 2), 4), ((8, 2, 2), 37), ((16, 2, 3), 697), ((3, 3, 6), 27)]
)
def test_dimension_counts(args, dim):
    assert enumerate_basis(*args).dimension == dim


def test_two_qubit_ordering():
    b = enumerate_basis(2, 2, 2)
    assert b.states.tolist() == [[0, 0], [1, 0], [0, 1], [1, 1]]
    # excitation first, then the occupation tuple in descending order
    big = enumerate_basis(4, 3, 4)
    keys = [(int(s.sum()), tuple(-s)) for s in big.states]
    assert keys == sorted(keys)


@pytest.mark.parametrize("args", [(0, 2, 0), (2, 1, 1), (2, 2, 3), (3, 2, -1)])
def test_invalid_bounds(args):
    with pytest.raises(ParameterError):
        enumerate_basis(*args)


@given(st.integers(1, 6), st.integers(2, 4), st.data())
def test_basis_invariants(n, L, data):
    cap = data.draw(st.integers(0, n * (L - 1)))
    b = enumerate_basis(n, L, cap)
    brute = [o for o in product(range(L), repeat=n) if sum(o) <= cap]
    assert b.dimension == len(brute)
    assert len({tuple(s) for s in b.states}) == b.dimension
    for k, s in enumerate(b.states):
        assert b.index(s) == k
    assert np.array_equal(b.lookup(b.states), np.arange(b.dimension))
    again = enumerate_basis(n, L, cap)
    assert np.array_equal(again.states, b.states)
    if L == 2:
        assert b.dimension == sum(math.comb(n, m) for m in range(cap + 1))


def test_single_qubit_lowering():
    b = enumerate_basis(1, 2, 1)
    s = site_lowering(b, 0).toarray()
    e, g = basis_state(b, [1]).amplitudes, ground_state(b).amplitudes
    assert np.allclose(s @ e, g)
    assert np.allclose(s @ g, 0)


def test_bosonic_matrix_element():
    b = enumerate_basis(1, 3, 2)
    a = site_lowering(b, 0)
    assert np.allclose(a @ basis_state(b, [2]).amplitudes, math.sqrt(2) * basis_state(b, [1]).amplitudes)


def test_number_on_pair_state():
    b = enumerate_basis(3, 2, 2)
    psi = basis_state(b, [1, 1, 0]).amplitudes
    n0 = (site_raising(b, 0) @ site_lowering(b, 0)) @ psi
    assert np.allclose(n0, psi)
    assert np.allclose(number_operator(b, 0) @ psi, psi)
    assert np.allclose(total_number(b) @ psi, 2 * psi)


def test_site_out_of_range():
    b = enumerate_basis(3, 2, 1)
    with pytest.raises(ParameterError):
        site_lowering(b, 3)
    with pytest.raises(ParameterError):
        collective_lowering(b, [])


def test_collective_examples():
    b = enumerate_basis(2, 2, 2)
    S = collective_lowering(b, [0, 1], 1 / math.sqrt(2))
    out = S @ basis_state(b, [1, 1]).amplitudes
    expect = (basis_state(b, [0, 1]).amplitudes + basis_state(b, [1, 0]).amplitudes) / math.sqrt(2)
    assert np.allclose(out, expect)
    A = collective_lowering(b, [0, 1], [1 / math.sqrt(2), -1 / math.sqrt(2)])
    sym = S.getH() @ ground_state(b).amplitudes
    assert np.allclose(A @ sym, 0)


@pytest.mark.parametrize("N, M", [(5, 2), (8, 3)])
def test_collective_normalization(N, M):
    b = enumerate_basis(N, 2, 2)
    S2 = collective_lowering(b, range(M, N), 1 / math.sqrt(N - M))
    g = ground_state(b).amplitudes
    assert np.allclose(S2 @ (S2.getH() @ g), g)


@given(st.integers(1, 5), st.integers(0, 4), st.integers(0, 4))
def test_qubit_algebra(n, i, j):
    b = enumerate_basis(n, 2, n)
    i, j = i % n, j % n
    si, sj = site_lowering(b, i), site_lowering(b, j)
    assert (si @ si).count_nonzero() == 0
    assert (si @ sj - sj @ si).count_nonzero() == 0


@given(st.integers(1, 4), st.integers(1, 2))
def test_bosonic_commutator(K, cap):
    L = cap + 2
    b = enumerate_basis(K, L, cap)
    S = collective_lowering(b, range(K), 1 / math.sqrt(K))
    comm = (S @ S.getH() - S.getH() @ S).toarray()
    inner = np.all(b.states < L - 1, axis=1) & (b.excitations < cap)
    sub = comm[np.ix_(inner, inner)]
    assert np.allclose(sub, np.eye(sub.shape[0]), atol=1e-12)


def test_polynomial_examples():
    b = enumerate_basis(4, 2, 2)
    up0 = site_raising(b, 0)
    psi, nrm = state_from_polynomial(b, [(1.0, [up0])])
    assert nrm == pytest.approx(1.0)
    assert np.allclose(psi.amplitudes, basis_state(b, [1, 0, 0, 0]).amplitudes)
    S1d = collective_lowering(b, [0, 1], 1 / math.sqrt(2)).getH()
    psi, nrm = state_from_polynomial(b, [(1.0, [S1d, S1d])])
    assert abs(abs(psi[[1, 1, 0, 0]]) - 1) < 1e-12
    with pytest.raises(DegenerateStateError):
        state_from_polynomial(b, [(1.0, [up0, up0])])


def test_equation_seven_is_normalized():
    # coefficients with S1 on two sites and S2 on the other six, prefactor sqrt((N-3)/(N-1))
    N = 8
    b = enumerate_basis(N, 2, 2)
    S1d = collective_lowering(b, [0, 1], 1 / math.sqrt(2)).getH()
    S2d = collective_lowering(b, range(2, N), 1 / math.sqrt(N - 2)).getH()
    pre = math.sqrt((N - 3) / (N - 1))
    terms = [
        (pre, [S1d, S1d]),
        (-pre * math.sqrt(2) / math.sqrt(N - 2), [S1d, S2d]),
        (pre / (N - 3), [S2d, S2d]),
    ]
    _, nrm = state_from_polynomial(b, terms)
    assert nrm == pytest.approx(1.0, abs=1e-12)


def test_state_vector_helpers():
    b = enumerate_basis(2, 2, 1)
    v = StateVector(b, np.array([1.0, 1.0, 0.0]))
    assert v.norm == pytest.approx(math.sqrt(2))
    assert v.normalized().norm == pytest.approx(1.0)
    assert v.overlap(ground_state(b)) == pytest.approx(1.0)
    with pytest.raises(DegenerateStateError):
        StateVector(b, np.zeros(3)).normalized()
