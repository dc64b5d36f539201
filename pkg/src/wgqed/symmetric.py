"""Permutation-symmetric representation of density matrices.

When the sites split into groups that are interchangeable (equal couplings,
detunings and drives within a group, block-constant couplings between groups)
and the initial state is invariant under permutations inside each group, the
density matrix stays in the span of the symmetrized operators

    P(n) = sum over site assignments of  (x)_j |a_j><b_j|,

where ``n`` records, per group, how many sites carry each of the four local
operators ``|e><e|, |e><g|, |g><e|, |g><g|`` (in that order).  The number of
such elements grows polynomially with the group sizes, so chains of 16 qubits
with several excitations stay cheap.

Coefficients ``v_n`` are the matrix elements of rho: ``<c|rho|c'> = v_n`` for
any configuration pair ``(c, c')`` whose per-group counts are ``n``.
"""
from __future__ import annotations

from math import comb, factorial
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BasisMismatchError, NotSymmetricError, ParameterError
from .hilbert import SectorBasis, StateVector

__all__ = ["SymmetricSpace", "SymmetricState"]

EE, EG, GE, GG = range(4)


def _group_counts(K: int) -> np.ndarray:
    out = [
        (ee, eg, ge, K - ee - eg - ge)
        for ee in range(K + 1)
        for eg in range(K + 1 - ee)
        for ge in range(K + 1 - ee - eg)
    ]
    return np.array(out, dtype=np.int64)


class SymmetricSpace:
    """Symmetrized operator basis for sites partitioned into ``groups``.

    ``max_excitation`` truncates ket and bra excitation numbers separately,
    matching a :class:`~wgqed.hilbert.SectorBasis` with the same cap.
    """

    def __init__(self, groups: Sequence[Sequence[int]], max_excitation: int):
        groups = [tuple(sorted(int(j) for j in g)) for g in groups]
        sites = sorted(j for g in groups for j in g)
        if not groups or any(len(g) == 0 for g in groups):
            raise ParameterError("groups must be non-empty")
        if sites != list(range(len(sites))):
            raise ParameterError("groups must partition the sites 0..N-1")
        self.groups = tuple(groups)
        self.n_sites = len(sites)
        self.sizes = np.array([len(g) for g in groups], dtype=np.int64)
        self.max_excitation = int(max_excitation)
        if not 0 <= self.max_excitation <= self.n_sites:
            raise ParameterError("max_excitation outside [0, N]")
        self.elements = self._enumerate()
        self.elements.setflags(write=False)
        self.ket_exc = (self.elements[:, :, EE] + self.elements[:, :, EG]).sum(axis=1)
        self.bra_exc = (self.elements[:, :, EE] + self.elements[:, :, GE]).sum(axis=1)
        self._radix = self._make_radix()
        keys = self._encode(self.elements)
        self._order = np.argsort(keys)
        self._sorted_keys = keys[self._order]
        self._cache: dict = {}

    # -- enumeration and lookup ---------------------------------------------

    def _enumerate(self) -> np.ndarray:
        cap = self.max_excitation
        per_group = [_group_counts(int(K)) for K in self.sizes]
        rows: list[np.ndarray] = [np.zeros((1, 0, 4), dtype=np.int64)]
        kets = np.zeros(1, dtype=np.int64)
        bras = np.zeros(1, dtype=np.int64)
        for opts in per_group:
            k_add = opts[:, EE] + opts[:, EG]
            b_add = opts[:, EE] + opts[:, GE]
            new_k = kets[:, None] + k_add[None, :]
            new_b = bras[:, None] + b_add[None, :]
            keep = (new_k <= cap) & (new_b <= cap)
            i, j = np.nonzero(keep)
            prev = rows[0]
            rows = [np.concatenate([prev[i], opts[j][:, None, :]], axis=1)]
            kets, bras = new_k[i, j], new_b[i, j]
        return rows[0]

    @property
    def dimension(self) -> int:
        return self.elements.shape[0]

    def _make_radix(self) -> np.ndarray:
        bases = []
        for K in self.sizes:
            bases.extend([K + 1] * 3)
        radix = np.ones(len(bases), dtype=np.int64)
        for k in range(len(bases) - 2, -1, -1):
            radix[k] = radix[k + 1] * bases[k + 1]
        return radix

    def _encode(self, elems: np.ndarray) -> np.ndarray:
        flat = elems[..., :3].reshape(elems.shape[0], -1)
        return flat @ self._radix

    def lookup(self, elems: np.ndarray) -> np.ndarray:
        """Indices of the given count arrays (shape ``(k, G, 4)``); -1 when absent."""
        elems = np.asarray(elems, dtype=np.int64)
        valid = np.all(elems >= 0, axis=(1, 2))
        valid &= np.all(elems.sum(axis=2) == self.sizes[None, :], axis=1)
        keys = self._encode(np.where(elems < 0, 0, elems))
        pos = np.searchsorted(self._sorted_keys, keys).clip(max=self.dimension - 1)
        found = valid & (self._sorted_keys[pos] == keys)
        return np.where(found, self._order[pos], -1)

    # -- elementary superoperators --------------------------------------------

    def _transition(self, g: int, moves: Sequence[tuple[int, int]]) -> sp.csr_matrix:
        rows, cols, vals = [], [], []
        E = self.elements
        for src, dst in moves:
            ok = E[:, g, src] > 0
            tgt = E[ok].copy()
            tgt[:, g, src] -= 1
            tgt[:, g, dst] += 1
            idx = self.lookup(tgt)
            keep = idx >= 0
            rows.append(idx[keep])
            cols.append(np.flatnonzero(ok)[keep])
            vals.append(tgt[keep, g, dst].astype(float))
        r = np.concatenate(rows)
        c = np.concatenate(cols)
        v = np.concatenate(vals)
        n = self.dimension
        return sp.csr_matrix((v.astype(complex), (r, c)), shape=(n, n))

    def left(self, g: int, op: str) -> sp.csr_matrix:
        """Superoperator ``rho -> X rho`` with ``X`` one of ``S``, ``Sd``, ``N`` on group ``g``."""
        key = ("L", g, op)
        if key not in self._cache:
            if op == "S":
                m = self._transition(g, [(EE, GE), (EG, GG)])
            elif op == "Sd":
                m = self._transition(g, [(GE, EE), (GG, EG)])
            elif op == "N":
                m = sp.diags((self.elements[:, g, EE] + self.elements[:, g, EG]).astype(complex), format="csr")
            else:
                raise ParameterError(f"unknown operator {op!r}")
            self._cache[key] = m
        return self._cache[key]

    def right(self, g: int, op: str) -> sp.csr_matrix:
        """Superoperator ``rho -> rho X``."""
        key = ("R", g, op)
        if key not in self._cache:
            if op == "S":
                m = self._transition(g, [(EG, EE), (GG, GE)])
            elif op == "Sd":
                m = self._transition(g, [(EE, EG), (GE, GG)])
            elif op == "N":
                m = sp.diags((self.elements[:, g, EE] + self.elements[:, g, GE]).astype(complex), format="csr")
            else:
                raise ParameterError(f"unknown operator {op!r}")
            self._cache[key] = m
        return self._cache[key]

    def local_decay(self, g: int) -> sp.csr_matrix:
        """``rho -> sum_{j in g} sigma_j rho sigma_j^dag``."""
        key = ("D", g)
        if key not in self._cache:
            self._cache[key] = self._transition(g, [(EE, GG)])
        return self._cache[key]

    def local_dephasing(self, g: int) -> np.ndarray:
        """Diagonal of ``rho -> sum_{j in g} n_j rho n_j``."""
        return self.elements[:, g, EE].astype(float)

    # -- functionals -----------------------------------------------------------

    @property
    def trace_functional(self) -> np.ndarray:
        E = self.elements
        diag = np.all((E[:, :, EG] == 0) & (E[:, :, GE] == 0), axis=1)
        w = np.ones(self.dimension)
        for g, K in enumerate(self.sizes):
            w *= np.array([comb(int(K), int(k)) for k in E[:, g, EE]], dtype=float)
        return np.where(diag, w, 0.0)

    def group_occupations(self, basis: SectorBasis) -> np.ndarray:
        """Per-group excitation counts of every basis state, shape ``(D, G)``."""
        self._check_basis(basis)
        out = np.zeros((basis.dimension, len(self.groups)), dtype=np.int64)
        for g, members in enumerate(self.groups):
            out[:, g] = basis.states[:, list(members)].sum(axis=1)
        return out

    def _check_basis(self, basis: SectorBasis):
        if basis.n_sites != self.n_sites or basis.local_dim != 2:
            raise BasisMismatchError("symmetric representation needs a qubit basis on the same sites")

    def pair_elements(self, basis: SectorBasis, kets: np.ndarray, bras: np.ndarray) -> np.ndarray:
        """Element index of each configuration pair ``(kets[i], bras[i])``."""
        K = basis.states[np.asarray(kets)].astype(bool)
        B = basis.states[np.asarray(bras)].astype(bool)
        elems = np.empty((K.shape[0], len(self.groups), 4), dtype=np.int64)
        for g, members in enumerate(self.groups):
            k, b = K[:, list(members)], B[:, list(members)]
            elems[:, g, EE] = (k & b).sum(axis=1)
            elems[:, g, EG] = (k & ~b).sum(axis=1)
            elems[:, g, GE] = (~k & b).sum(axis=1)
            elems[:, g, GG] = len(members) - elems[:, g, :3].sum(axis=1)
        return self.lookup(elems)

    def operator_functional(self, op, basis: SectorBasis) -> np.ndarray:
        """Vector ``w`` with ``Tr(op rho) = w . v`` for any symmetric ``rho``."""
        self._check_basis(basis)
        coo = sp.coo_matrix(op)
        if coo.shape != (basis.dimension, basis.dimension):
            raise BasisMismatchError("operator does not act on this basis")
        nz = coo.data != 0
        rows, cols, data = coo.row[nz], coo.col[nz], coo.data[nz]
        # op[r, s] multiplies rho[s, r]
        idx = self.pair_elements(basis, cols, rows)
        if np.any(idx < 0):
            keep = idx >= 0
            idx, data = idx[keep], data[keep]
        w = np.zeros(self.dimension, dtype=complex)
        np.add.at(w, idx, data)
        return w

    def configuration_functional(self, occupation: Sequence[int]) -> np.ndarray:
        """Functional returning the population of one configuration ``|c><c|``."""
        occ = np.asarray(occupation, dtype=np.int64)
        elem = np.zeros((1, len(self.groups), 4), dtype=np.int64)
        for g, members in enumerate(self.groups):
            k = int(occ[list(members)].sum())
            elem[0, g] = (k, 0, 0, len(members) - k)
        w = np.zeros(self.dimension, dtype=complex)
        idx = self.lookup(elem)[0]
        if idx >= 0:
            w[idx] = 1.0
        return w

    def _amplitude_table(self, state: StateVector) -> dict:
        """Per-configuration amplitude as a function of the group occupation tuple."""
        occ = self.group_occupations(state.basis)
        amps = state.amplitudes
        table: dict = {}
        scale = max(np.abs(amps).max(), 1e-300)
        for k in range(state.basis.dimension):
            key = tuple(occ[k])
            a = amps[k]
            if key in table:
                if abs(table[key] - a) > 1e-10 * scale:
                    raise NotSymmetricError("state is not symmetric under the site groups")
            else:
                table[key] = a
        return table

    def _element_occupations(self) -> tuple[np.ndarray, np.ndarray]:
        E = self.elements
        return E[:, :, EE] + E[:, :, EG], E[:, :, EE] + E[:, :, GE]

    def state_functional(self, state: StateVector) -> np.ndarray:
        """Functional giving ``<psi|rho|psi>`` for a group-symmetric pure ``psi``."""
        table = self._amplitude_table(state)
        kp, bp = self._element_occupations()
        phi_k = np.array([table.get(tuple(r), 0.0) for r in kp], dtype=complex)
        phi_b = np.array([table.get(tuple(r), 0.0) for r in bp], dtype=complex)
        mult = np.ones(self.dimension)
        for g, K in enumerate(self.sizes):
            e = self.elements[:, g]
            mult *= np.array(
                [factorial(int(K)) // (factorial(a) * factorial(b) * factorial(c) * factorial(d)) for a, b, c, d in e],
                dtype=float,
            )
        # <psi|rho|psi> = sum_{c,c'} conj(psi_c) rho[c,c'] psi_c'
        return np.conj(phi_k) * phi_b * mult

    # -- conversions -----------------------------------------------------------

    def from_pure(self, state: StateVector) -> np.ndarray:
        table = self._amplitude_table(state)
        kp, bp = self._element_occupations()
        phi_k = np.array([table.get(tuple(r), 0.0) for r in kp], dtype=complex)
        phi_b = np.array([table.get(tuple(r), 0.0) for r in bp], dtype=complex)
        return phi_k * np.conj(phi_b)

    def representatives(self, basis: SectorBasis) -> tuple[np.ndarray, np.ndarray]:
        """One (ket, bra) basis-index pair per element, -1 when outside the basis."""
        self._check_basis(basis)
        n = self.dimension
        ket = np.zeros((n, self.n_sites), dtype=np.int64)
        bra = np.zeros((n, self.n_sites), dtype=np.int64)
        for g, members in enumerate(self.groups):
            members = np.array(members)
            e = self.elements[:, g]
            pos = np.arange(len(members))[None, :]
            c1 = e[:, [EE]]
            c2 = c1 + e[:, [EG]]
            c3 = c2 + e[:, [GE]]
            ket[:, members] = (pos < c2).astype(np.int64)
            bra[:, members] = ((pos < c1) | ((pos >= c2) & (pos < c3))).astype(np.int64)
        return basis.lookup(ket), basis.lookup(bra)

    def from_density(self, rho: np.ndarray, basis: SectorBasis, check: bool = True) -> np.ndarray:
        ki, bi = self.representatives(basis)
        if np.any(ki < 0) or np.any(bi < 0):
            raise BasisMismatchError("basis cap is smaller than the symmetric space cap")
        v = np.asarray(rho)[ki, bi].astype(complex)
        if check:
            back = self.to_density(v, basis)
            if np.abs(back - rho).max() > 1e-10 * max(1.0, np.abs(rho).max()):
                raise NotSymmetricError("density matrix is not symmetric under the site groups")
        return v

    def to_density(self, v: np.ndarray, basis: SectorBasis) -> np.ndarray:
        self._check_basis(basis)
        D = basis.dimension
        out = np.zeros((D, D), dtype=complex)
        cols = np.arange(D)
        for r in range(D):
            idx = self.pair_elements(basis, np.full(D, r), cols)
            ok = idx >= 0
            out[r, ok] = v[idx[ok]]
        return out


class SymmetricState:
    """Density matrix held as coefficients over a :class:`SymmetricSpace`."""

    def __init__(self, space: SymmetricSpace, vector: np.ndarray, basis: SectorBasis | None = None):
        self.space = space
        self.vector = np.asarray(vector, dtype=complex)
        self.basis = basis

    def trace(self) -> complex:
        return complex(self.space.trace_functional @ self.vector)

    def expectation(self, op) -> complex:
        if self.basis is None:
            raise BasisMismatchError("no sector basis attached to this state")
        return complex(self.space.operator_functional(op, self.basis) @ self.vector)

    def fidelity(self, state: StateVector) -> float:
        return float((self.space.state_functional(state) @ self.vector).real)

    def to_density(self, basis: SectorBasis | None = None):
        from .dynamics import DensityState

        basis = basis or self.basis
        if basis is None:
            raise BasisMismatchError("no sector basis given")
        return DensityState(basis, self.space.to_density(self.vector, basis))
