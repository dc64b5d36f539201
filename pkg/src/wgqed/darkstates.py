"""Analytic collective states of a mirror-spaced chain and their closed-form numbers.

With all spacings a multiple of the guided wavelength only the symmetric
superposition ``S = sum_j sqrt(Gamma_j) a_j`` couples to the waveguide.  Splitting
the chain into a stored set ``A`` (``M`` sites) and the rest ``B``, the dark states
below are built from the normalized collective operators

    S1^dag = sum_{j in A} a_j^dag / sqrt(M),   S2^dag = sum_{j in B} a_j^dag / sqrt(N - M)

and are annihilated by ``S``.  For spacings that are odd multiples of half a
wavelength, the same construction with alternating site signs applies.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BasisMismatchError, NoDarkStateError, ParameterError
from .hilbert import SectorBasis, StateVector, site_raising, state_from_polynomial

__all__ = [
    "Partition",
    "AnalyticPrediction",
    "symmetric_state",
    "dark_state",
    "dark_state_nonuniform",
    "transmon_dark_states",
    "analytic_predictions",
    "population_profile",
]


@dataclass(frozen=True)
class Partition:
    """Split of the sites into the stored set ``set_a`` and its complement."""

    set_a: tuple[int, ...]
    set_b: tuple[int, ...]

    def __post_init__(self):
        a = tuple(sorted(int(j) for j in self.set_a))
        b = tuple(sorted(int(j) for j in self.set_b))
        if not a:
            raise ParameterError("set_a must contain at least one site")
        if set(a) & set(b):
            raise ParameterError("set_a and set_b overlap")
        if len(set(a)) != len(a) or len(set(b)) != len(b):
            raise ParameterError("repeated site in partition")
        if sorted(a + b) != list(range(len(a) + len(b))):
            raise ParameterError("partition must cover sites 0..N-1 exactly")
        object.__setattr__(self, "set_a", a)
        object.__setattr__(self, "set_b", b)

    @classmethod
    def of(cls, n_sites: int, set_a: Iterable[int]) -> "Partition":
        a = tuple(int(j) for j in set_a)
        if any(not 0 <= j < n_sites for j in a):
            raise ParameterError(f"set_a sites must lie in [0, {n_sites - 1}]")
        return cls(a, tuple(j for j in range(n_sites) if j not in a))

    @classmethod
    def first(cls, n_sites: int, m: int) -> "Partition":
        return cls.of(n_sites, range(m))

    @property
    def n_sites(self) -> int:
        return len(self.set_a) + len(self.set_b)

    @property
    def m(self) -> int:
        return len(self.set_a)


@dataclass(frozen=True)
class AnalyticPrediction:
    name: str
    value: float
    parameters: dict = field(default_factory=dict)
    note: str = ""

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ParameterError(f"prediction {self.name!r} is not finite")


def _check(N: int, basis: SectorBasis, excitations: int):
    if basis.n_sites != N:
        raise BasisMismatchError(f"basis has {basis.n_sites} sites, expected {N}")
    if basis.max_excitation < excitations:
        raise ParameterError(
            f"basis cap {basis.max_excitation} is below the {excitations} excitations required"
        )


def _signs(N: int, signs: str) -> np.ndarray:
    if signs == "uniform":
        return np.ones(N)
    if signs == "alternating":
        return (-1.0) ** np.arange(N)
    raise ParameterError(f"signs must be 'uniform' or 'alternating', got {signs!r}")


def _raising_sum(basis: SectorBasis, sites: Sequence[int], weights: np.ndarray) -> sp.csr_matrix:
    op = sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)
    for j in sites:
        op = op + weights[j] * site_raising(basis, j)
    return op.tocsr()


def symmetric_state(N: int, M: int, basis: SectorBasis, signs: str = "uniform") -> StateVector:
    """``(sum_j a_j^dag)^M |G>`` normalized; the Dicke state for qubits."""
    if not 0 <= M <= N:
        raise ParameterError(f"M must lie in [0, N], got {M}")
    _check(N, basis, M)
    up = _raising_sum(basis, range(N), _signs(N, signs))
    state, _ = state_from_polynomial(basis, [(1.0, [up] * M)])
    return state


def dark_state(
    N: int,
    M: int,
    basis: SectorBasis,
    partition: Partition | None = None,
    signs: str = "uniform",
) -> StateVector:
    """M-excitation dark state storing most of its population on ``partition.set_a``.

    Built as ``sum_k (-1)^k C(N-M-k, M-k) (sqrt(M) S1^dag)^(M-k) (sqrt(N-M) S2^dag)^k |G>``
    and normalized.  ``signs='alternating'`` gives the half-wavelength variant.
    """
    if M < 1:
        raise ParameterError(f"M must be >= 1, got {M}")
    if 2 * M > N:
        raise NoDarkStateError(f"no dark state for 2M > N (N={N}, M={M})")
    _check(N, basis, M)
    partition = partition or Partition.first(N, M)
    if partition.n_sites != N or partition.m != M:
        raise ParameterError("partition does not match (N, M)")
    w = _signs(N, signs)
    a_up = _raising_sum(basis, partition.set_a, w)  # sqrt(M) S1^dag
    b_up = _raising_sum(basis, partition.set_b, w)  # sqrt(N-M) S2^dag
    terms = [
        ((-1) ** k * math.comb(N - M - k, M - k), [a_up] * (M - k) + [b_up] * k)
        for k in range(M + 1)
    ]
    state, _ = state_from_polynomial(basis, terms)
    return state


def dark_state_nonuniform(
    N: int,
    M: int,
    gamma_1: float,
    gamma_2: float,
    basis: SectorBasis,
    partition: Partition | None = None,
) -> StateVector:
    """Dark state when ``set_a`` couples with ``gamma_1`` and the rest with ``gamma_2``.

    ``M = 1``: ``sqrt((N-1) g2) a_1^dag - sqrt(g1) S2^dag``.
    ``M = 2``: ``S1^dag^2 - sqrt(2 g1 / ((N-2) g2)) S1^dag S2^dag + g1 / ((N-3) g2) S2^dag^2``.
    """
    if M not in (1, 2):
        raise ParameterError(f"non-uniform dark states are available for M in (1, 2), got {M}")
    if not (gamma_1 > 0 and gamma_2 > 0 and math.isfinite(gamma_1) and math.isfinite(gamma_2)):
        raise ParameterError("coupling rates must be positive and finite")
    if 2 * M > N:
        raise NoDarkStateError(f"no dark state for 2M > N (N={N}, M={M})")
    _check(N, basis, M)
    partition = partition or Partition.first(N, M)
    if partition.n_sites != N or partition.m != M:
        raise ParameterError("partition does not match (N, M)")
    ones = np.ones(N)
    s1 = _raising_sum(basis, partition.set_a, ones) / math.sqrt(M)
    s2 = _raising_sum(basis, partition.set_b, ones) / math.sqrt(N - M)
    if M == 1:
        terms = [(math.sqrt((N - 1) * gamma_2), [s1]), (-math.sqrt(gamma_1), [s2])]
    else:
        terms = [
            (1.0, [s1, s1]),
            (-math.sqrt(2 * gamma_1 / ((N - 2) * gamma_2)), [s1, s2]),
            (gamma_1 / ((N - 3) * gamma_2), [s2, s2]),
        ]
    state, _ = state_from_polynomial(basis, terms)
    return state


def transmon_dark_states(
    N: int, basis: SectorBasis, site: int = 0
) -> tuple[StateVector, StateVector]:
    """Two-excitation bosonic states ``(Phi_S, Phi_D)``.

    ``Phi_S`` is ``(sum_j a_j^dag)^2 |G>`` and ``Phi_D`` the square of the
    single-excitation dark mode, ``(sqrt(N-1) a_site^dag - S2^dag)^2 |G>``, both normalized.
    """
    if basis.local_dim < 3:
        raise BasisMismatchError("transmon states need local_dim >= 3")
    if N < 2:
        raise ParameterError("transmon dark state needs N >= 2")
    _check(N, basis, 2)
    basis.check_site(site)
    ones = np.ones(N)
    sym = _raising_sum(basis, range(N), ones)
    rest = [j for j in range(N) if j != site]
    mode = math.sqrt(N - 1) * site_raising(basis, site) - _raising_sum(basis, rest, ones) / math.sqrt(N - 1)
    phi_s, _ = state_from_polynomial(basis, [(1.0, [sym, sym])])
    phi_d, _ = state_from_polynomial(basis, [(1.0, [mode, mode])])
    return phi_s, phi_d


def population_profile(state: StateVector) -> np.ndarray:
    """Mean occupation ``<a_j^dag a_j>`` of every site."""
    p = np.abs(state.amplitudes) ** 2
    return p @ state.basis.states


def analytic_predictions(
    N: int, M: int, gamma_1: float | None = None, gamma_2: float | None = None
) -> list[AnalyticPrediction]:
    """Closed-form values used to cross-check the numerically built states.

    Rates are in units of the uniform waveguide coupling.
    """
    if M < 1 or N < 2:
        raise ParameterError("need N >= 2 and M >= 1")
    if 2 * M > N:
        raise NoDarkStateError(f"no dark state for 2M > N (N={N}, M={M})")
    par = {"N": N, "M": M}
    frac = (N - 2 * M + 1) / (N - 2 * M + 2)
    out = [
        AnalyticPrediction(
            "population_fraction", frac, par, "set_a population per excitation (adopted reading)"
        ),
        AnalyticPrediction("set_a_population", M * frac, par, "absolute set_a population"),
        AnalyticPrediction(
            "set_a_population_literal", frac, par, "alternative reading: frac taken as absolute"
        ),
        AnalyticPrediction(
            "degeneracy", math.comb(N, M) - math.comb(N, M - 1), par, "size of the dark manifold"
        ),
        AnalyticPrediction("symmetric_rate", M * (N - M + 1), par),
        AnalyticPrediction("bright_ladder_rate", (M - 1) * (N - M), par),
        AnalyticPrediction("probe_bright_rate", N - 2 * M, par, "linewidth seen by a probe"),
        AnalyticPrediction("drive_overlap_bright", math.sqrt(1 / N), par),
        AnalyticPrediction("drive_overlap_dark", math.sqrt(1 - 1 / N), par),
        AnalyticPrediction("first_site_population", 1 - 1 / N, par, "M = 1 dark state"),
        AnalyticPrediction("dark_state_overlap", 1 / (N - 1), par, "two M = 1 dark states on different sites"),
        AnalyticPrediction("transmon_first_site_population", 2 * (N - 1) / N, par),
    ]
    if N >= 3:
        out.append(
            AnalyticPrediction(
                "ladder_drive_element",
                math.sqrt((N - 3) / N) * (1 + 1 / math.sqrt((N - 1) * (N - 2))),
                par,
                "drive on the second site between the M = 1 and M = 2 dark states",
            )
        )
        out.append(AnalyticPrediction("pair_drive_element", math.sqrt((N - 3) / (N - 1)), par))
    if gamma_1 is not None and gamma_2 is not None:
        p = dict(par, gamma_1=gamma_1, gamma_2=gamma_2)
        out.append(
            AnalyticPrediction(
                "nonuniform_first_site_population",
                (N - 1) * gamma_2 / (gamma_1 + (N - 1) * gamma_2),
                p,
            )
        )
    return out
