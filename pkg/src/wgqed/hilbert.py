"""Excitation-number truncated Hilbert spaces and the operators acting on them.

A :class:`SectorBasis` lists every occupation vector ``(n_1, ..., n_N)`` with
``n_j < local_dim`` and ``sum(n) <= max_excitation``.  States are ordered by
total excitation first and then in descending lexicographic order, so that for
qubits the single-excitation sector reads ``|e_1>, |e_2>, ..., |e_N>``.

Operators are returned as ``scipy.sparse.csr_matrix`` objects acting on the
basis.  Site indices are 0-based throughout the library.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Iterator, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BasisMismatchError, DegenerateStateError, ParameterError

__all__ = [
    "SectorBasis",
    "StateVector",
    "enumerate_basis",
    "site_lowering",
    "site_raising",
    "number_operator",
    "total_number",
    "collective_lowering",
    "ground_state",
    "basis_state",
    "state_from_polynomial",
]


def _compositions(n_sites: int, total: int, cap: int) -> Iterator[tuple[int, ...]]:
    # descending lexicographic order
    if n_sites == 0:
        if total == 0:
            yield ()
        return
    if total > cap * n_sites:
        return
    for first in range(min(cap, total), -1, -1):
        for rest in _compositions(n_sites - 1, total - first, cap):
            yield (first,) + rest


class SectorBasis:
    """Occupation-number basis truncated at a total excitation number.

    Instances are immutable; operators built from them are cached per instance.
    """

    def __init__(self, n_sites: int, local_dim: int, max_excitation: int):
        if n_sites < 1:
            raise ParameterError(f"n_sites must be >= 1, got {n_sites}")
        if local_dim < 2:
            raise ParameterError(f"local_dim must be >= 2, got {local_dim}")
        if not 0 <= max_excitation <= n_sites * (local_dim - 1):
            raise ParameterError(
                f"max_excitation must lie in [0, {n_sites * (local_dim - 1)}], "
                f"got {max_excitation}"
            )
        self.n_sites = int(n_sites)
        self.local_dim = int(local_dim)
        self.max_excitation = int(max_excitation)
        states = [
            occ
            for m in range(self.max_excitation + 1)
            for occ in _compositions(self.n_sites, m, self.local_dim - 1)
        ]
        self._states = np.array(states, dtype=np.int64).reshape(len(states), self.n_sites)
        self._states.setflags(write=False)
        self._index = {occ: k for k, occ in enumerate(states)}
        self._cache: dict = {}

    def __repr__(self):
        return (
            f"SectorBasis(n_sites={self.n_sites}, local_dim={self.local_dim}, "
            f"max_excitation={self.max_excitation}, dimension={self.dimension})"
        )

    @property
    def states(self) -> np.ndarray:
        """Read-only ``(dimension, n_sites)`` array of occupation vectors."""
        return self._states

    @property
    def dimension(self) -> int:
        return self._states.shape[0]

    def index(self, occupation: Sequence[int]) -> int:
        try:
            return self._index[tuple(int(n) for n in occupation)]
        except KeyError:
            raise ParameterError(f"occupation {tuple(occupation)} is not in the basis") from None

    @cached_property
    def excitations(self) -> np.ndarray:
        """Total excitation number of every basis state."""
        out = self._states.sum(axis=1)
        out.setflags(write=False)
        return out

    def sector(self, m: int) -> slice:
        """Contiguous slice of basis indices carrying exactly ``m`` excitations."""
        if not 0 <= m <= self.max_excitation:
            raise ParameterError(f"sector {m} outside [0, {self.max_excitation}]")
        lo = int(np.searchsorted(self.excitations, m, side="left"))
        hi = int(np.searchsorted(self.excitations, m, side="right"))
        return slice(lo, hi)

    def same_as(self, other: "SectorBasis") -> bool:
        return self is other or (
            self.n_sites == other.n_sites
            and self.local_dim == other.local_dim
            and self.max_excitation == other.max_excitation
        )

    def check_site(self, site: int) -> int:
        if not 0 <= site < self.n_sites:
            raise ParameterError(f"site {site} outside [0, {self.n_sites - 1}]")
        return int(site)

    @cached_property
    def _keys(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        radix = self.local_dim ** np.arange(self.n_sites - 1, -1, -1, dtype=np.int64)
        keys = self._states @ radix
        order = np.argsort(keys)
        return radix, keys[order], order

    def lookup(self, occupations: np.ndarray) -> np.ndarray:
        """Vectorized :meth:`index`; rows that are not basis states map to -1."""
        occ = np.asarray(occupations, dtype=np.int64).reshape(-1, self.n_sites)
        radix, sorted_keys, order = self._keys
        valid = np.all((occ >= 0) & (occ < self.local_dim), axis=1)
        valid &= occ.sum(axis=1) <= self.max_excitation
        keys = occ @ radix
        pos = np.searchsorted(sorted_keys, keys).clip(max=len(sorted_keys) - 1)
        found = valid & (sorted_keys[pos] == keys)
        return np.where(found, order[pos], -1)

    @cached_property
    def _lowered_index(self) -> np.ndarray:
        # lowered[k, j]: index of state k with one quantum removed at site j, -1 if empty
        out = -np.ones(self._states.shape, dtype=np.int64)
        for j in range(self.n_sites):
            occ = self._states.copy()
            occ[:, j] -= 1
            out[:, j] = self.lookup(occ)
        return out


def enumerate_basis(n_sites: int, local_dim: int, max_excitation: int) -> SectorBasis:
    """Build the truncated occupation basis; see :class:`SectorBasis`."""
    return SectorBasis(n_sites, local_dim, max_excitation)


def site_lowering(basis: SectorBasis, site: int) -> sp.csr_matrix:
    """Annihilation operator at ``site``: sigma for qubits, bosonic ``a`` otherwise."""
    site = basis.check_site(site)
    key = ("lower", site)
    if key not in basis._cache:
        cols = np.flatnonzero(basis._lowered_index[:, site] >= 0)
        rows = basis._lowered_index[cols, site]
        vals = np.sqrt(basis.states[cols, site].astype(float))
        dim = basis.dimension
        op = sp.csr_matrix((vals.astype(complex), (rows, cols)), shape=(dim, dim))
        basis._cache[key] = op
    return basis._cache[key]


def site_raising(basis: SectorBasis, site: int) -> sp.csr_matrix:
    """Creation operator at ``site``, projected back onto the truncated space."""
    return site_lowering(basis, site).T.tocsr()


def number_operator(basis: SectorBasis, site: int) -> sp.csr_matrix:
    site = basis.check_site(site)
    return sp.diags(basis.states[:, site].astype(complex), format="csr")


def total_number(basis: SectorBasis) -> sp.csr_matrix:
    return sp.diags(basis.excitations.astype(complex), format="csr")


def collective_lowering(
    basis: SectorBasis, sites: Iterable[int], weights: complex | Sequence[complex] = 1.0
) -> sp.csr_matrix:
    """Return ``sum_j w_j a_j`` over ``sites``.

    ``weights`` is either one scalar applied to every site or one value per site.
    """
    sites = [basis.check_site(j) for j in sites]
    if not sites:
        raise ParameterError("collective operator needs at least one site")
    w = np.broadcast_to(np.asarray(weights, dtype=complex), (len(sites),))
    if not np.all(np.isfinite(w)):
        raise ParameterError("collective weights must be finite")
    op = sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)
    for j, wj in zip(sites, w):
        if wj != 0:
            op = op + wj * site_lowering(basis, j)
    return op.tocsr()


@dataclass(frozen=True, eq=False)
class StateVector:
    """Pure state expanded in a :class:`SectorBasis`."""

    basis: SectorBasis
    amplitudes: np.ndarray

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex)
        if amps.shape != (self.basis.dimension,):
            raise BasisMismatchError(
                f"amplitude vector of shape {amps.shape} does not fit {self.basis!r}"
            )
        object.__setattr__(self, "amplitudes", amps)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "StateVector":
        nrm = self.norm
        if nrm == 0:
            raise DegenerateStateError("cannot normalize the zero vector")
        return StateVector(self.basis, self.amplitudes / nrm)

    def overlap(self, other: "StateVector") -> complex:
        """Inner product <self|other>."""
        if not self.basis.same_as(other.basis):
            raise BasisMismatchError("states live on different bases")
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def density_matrix(self) -> np.ndarray:
        return np.outer(self.amplitudes, self.amplitudes.conj())

    def __getitem__(self, occupation) -> complex:
        return complex(self.amplitudes[self.basis.index(occupation)])


def ground_state(basis: SectorBasis) -> StateVector:
    amps = np.zeros(basis.dimension, dtype=complex)
    amps[0] = 1.0
    return StateVector(basis, amps)


def basis_state(basis: SectorBasis, occupation: Sequence[int]) -> StateVector:
    amps = np.zeros(basis.dimension, dtype=complex)
    amps[basis.index(occupation)] = 1.0
    return StateVector(basis, amps)


def state_from_polynomial(
    basis: SectorBasis, terms: Iterable[tuple[complex, Sequence[sp.spmatrix]]]
) -> tuple[StateVector, float]:
    """Apply ``sum_k c_k prod(factors_k)`` to the vacuum and normalize.

    Each factor is a creation operator (site or collective) on ``basis``; the
    rightmost factor acts first.  Returns the normalized state together with
    the norm before normalization.
    """
    vacuum = ground_state(basis).amplitudes
    total = np.zeros(basis.dimension, dtype=complex)
    for coeff, factors in terms:
        factors = list(factors)
        if len(factors) > basis.max_excitation:
            raise ParameterError(
                f"{len(factors)} creation factors exceed the basis cap {basis.max_excitation}"
            )
        vec = vacuum
        for op in reversed(factors):
            if op.shape != (basis.dimension, basis.dimension):
                raise BasisMismatchError("factor does not act on this basis")
            vec = op @ vec
        total += coeff * vec
    nrm = float(np.linalg.norm(total))
    if nrm < 1e-300:
        raise DegenerateStateError("polynomial annihilates the vacuum")
    return StateVector(basis, total / nrm), nrm
