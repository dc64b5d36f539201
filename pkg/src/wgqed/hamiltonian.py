"""Waveguide-mediated couplings, the non-Hermitian effective Hamiltonian and drives.

Units: rates in units of a reference waveguide decay rate, positions in units of
the guided-mode wavelength, so that the coupling phase between sites m and n is
``2 pi |x_m - x_n|``.  All energies are measured from the bare qubit frequency
(interaction picture).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import BasisMismatchError, ParameterError
from .hilbert import SectorBasis, site_lowering

__all__ = [
    "ChainGeometry",
    "CouplingMatrices",
    "Rectangular",
    "Gaussian",
    "DrivePulse",
    "snapped_cos_sin",
    "coupling_matrices",
    "collective_decay_amplitudes",
    "effective_hamiltonian",
    "hamiltonian_matrix",
    "jump_operators",
    "drive_operator",
    "drive_generator",
]

_SNAP_TOL = 1e-12


def snapped_cos_sin(x) -> tuple[np.ndarray, np.ndarray]:
    """Return ``cos(2 pi x), sin(2 pi x)``, exact at multiples of 1/4.

    Positions on the quarter-wavelength lattice would otherwise leave
    ``sin(2 pi n) ~ 1e-16`` residues in the couplings.
    """
    x = np.asarray(x, dtype=float)
    r = x - np.round(x)
    c = np.cos(2 * np.pi * r)
    s = np.sin(2 * np.pi * r)
    q = 4 * r
    qi = np.round(q)
    snap = np.abs(q - qi) <= _SNAP_TOL * np.maximum(1.0, np.abs(x))
    if np.any(snap):
        k = qi[snap].astype(int) % 4
        c[snap] = np.array([1.0, 0.0, -1.0, 0.0])[k]
        s[snap] = np.array([0.0, 1.0, 0.0, -1.0])[k]
    return c, s


@dataclass(frozen=True, eq=False)
class ChainGeometry:
    """Qubit chain along a waveguide.

    Attributes
    ----------
    positions : positions in units of the resonant wavelength.
    gamma_1d : per-site decay rate into the waveguide.
    detunings : static per-site detuning from the reference frequency.
    gamma_nr, gamma_dep : uncorrelated non-radiative decay and dephasing rates.
    anharmonicity : on-site interaction ``U`` (only used for ``local_dim > 2``).
    """

    positions: np.ndarray
    gamma_1d: np.ndarray
    detunings: np.ndarray = None
    gamma_nr: float = 0.0
    gamma_dep: float = 0.0
    anharmonicity: float = 0.0

    def __post_init__(self):
        pos = np.array(self.positions, dtype=float).reshape(-1)
        n = pos.size
        if n < 1:
            raise ParameterError("geometry needs at least one site")
        gam = np.array(np.broadcast_to(np.asarray(self.gamma_1d, dtype=float), (n,)))
        det = self.detunings
        det = np.zeros(n) if det is None else np.array(np.broadcast_to(np.asarray(det, dtype=float), (n,)))
        if not np.all(np.isfinite(pos)):
            raise ParameterError("positions must be finite")
        if not np.all(np.isfinite(gam)) or np.any(gam < 0):
            raise ParameterError("gamma_1d must be finite and non-negative")
        if not np.all(np.isfinite(det)):
            raise ParameterError("detunings must be finite")
        for name in ("gamma_nr", "gamma_dep"):
            v = float(getattr(self, name))
            if not math.isfinite(v) or v < 0:
                raise ParameterError(f"{name} must be finite and non-negative, got {v}")
            object.__setattr__(self, name, v)
        if not math.isfinite(float(self.anharmonicity)):
            raise ParameterError("anharmonicity must be finite")
        object.__setattr__(self, "anharmonicity", float(self.anharmonicity))
        for arr in (pos, gam, det):
            arr.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "gamma_1d", gam)
        object.__setattr__(self, "detunings", det)

    @classmethod
    def regular(
        cls,
        n_sites: int,
        spacing: float,
        gamma_1d: float | Sequence[float] = 1.0,
        **kwargs,
    ) -> "ChainGeometry":
        """Equally spaced chain starting at ``x = 0``."""
        if n_sites < 1:
            raise ParameterError(f"n_sites must be >= 1, got {n_sites}")
        if not math.isfinite(spacing):
            raise ParameterError("spacing must be finite")
        return cls(spacing * np.arange(n_sites, dtype=float), gamma_1d, **kwargs)

    @classmethod
    def two_rate(
        cls,
        n_sites: int,
        spacing: float,
        set_a: Iterable[int],
        gamma_1: float,
        gamma_2: float,
        **kwargs,
    ) -> "ChainGeometry":
        """Regular chain where ``set_a`` couples with ``gamma_1`` and the rest with ``gamma_2``."""
        gam = np.full(n_sites, float(gamma_2))
        idx = list(set_a)
        if any(not 0 <= j < n_sites for j in idx):
            raise ParameterError("set_a contains sites outside the chain")
        gam[idx] = gamma_1
        return cls.regular(n_sites, spacing, gam, **kwargs)

    @property
    def n_sites(self) -> int:
        return self.positions.size

    def replace(self, **changes) -> "ChainGeometry":
        return replace(self, **changes)

    def shifted(self, offset: float) -> "ChainGeometry":
        return self.replace(positions=self.positions + offset)


@dataclass(frozen=True, eq=False)
class CouplingMatrices:
    """Coherent exchange ``J`` and dissipative coupling ``Gamma`` (both real, symmetric)."""

    J: np.ndarray
    Gamma: np.ndarray

    @property
    def kernel(self) -> np.ndarray:
        """``J - i Gamma / 2``."""
        return self.J - 0.5j * self.Gamma


def coupling_matrices(geometry: ChainGeometry) -> CouplingMatrices:
    x = geometry.positions
    root = np.sqrt(np.outer(geometry.gamma_1d, geometry.gamma_1d))
    c, s = snapped_cos_sin(np.abs(x[:, None] - x[None, :]))
    J = 0.5 * root * s
    G = root * c
    np.fill_diagonal(J, 0.0)
    np.fill_diagonal(G, geometry.gamma_1d)
    for m in (J, G):
        m.setflags(write=False)
    return CouplingMatrices(J, G)


def collective_decay_amplitudes(geometry: ChainGeometry) -> np.ndarray:
    """Rows ``c_m, s_m`` with ``Gamma_mn = c_m c_n + s_m s_n``.

    The waveguide dissipator therefore has (at most) two collective jump
    operators, whatever the chain length.
    """
    c, s = snapped_cos_sin(geometry.positions)
    root = np.sqrt(geometry.gamma_1d)
    return np.vstack([root * c, root * s])


def _diagonal_terms(geometry: ChainGeometry, basis: SectorBasis, extra_detuning=None) -> np.ndarray:
    n = basis.states.astype(float)
    det = geometry.detunings if extra_detuning is None else geometry.detunings + extra_detuning
    diag = n @ det.astype(complex)
    diag += -0.5j * geometry.gamma_nr * n.sum(axis=1)
    diag += -1j * geometry.gamma_dep * (n**2).sum(axis=1)
    if basis.local_dim > 2 and geometry.anharmonicity != 0.0:
        diag += -0.5 * geometry.anharmonicity * (n * (n - 1)).sum(axis=1)
    return diag


def _check_sites(geometry: ChainGeometry, basis: SectorBasis):
    if geometry.n_sites != basis.n_sites:
        raise BasisMismatchError(
            f"geometry has {geometry.n_sites} sites but basis has {basis.n_sites}"
        )


def hamiltonian_matrix(
    kernel: np.ndarray, basis: SectorBasis, diagonal: np.ndarray | None = None
) -> sp.csr_matrix:
    """Sparse ``sum_mn kernel[m, n] a_m^dag a_n + diag(diagonal)``."""
    N = basis.n_sites
    D = basis.dimension
    lowered = basis._lowered_index  # (D, N)
    rows, cols, vals = [], [], []
    # a_m^dag a_n |k> : remove at n, add at m
    for n_ in range(N):
        src = np.flatnonzero(lowered[:, n_] >= 0)
        amp_n = np.sqrt(basis.states[src, n_].astype(float))
        for m in range(N):
            w = kernel[m, n_]
            if w == 0:
                continue
            if m == n_:
                rows.append(src)
                cols.append(src)
                vals.append(w * basis.states[src, n_].astype(float))
                continue
            occ = basis.states[src].copy()
            occ[:, n_] -= 1
            occ[:, m] += 1
            ok = occ[:, m] < basis.local_dim
            tgt = basis.lookup(occ[ok])
            rows.append(tgt)
            cols.append(src[ok])
            vals.append(w * amp_n[ok] * np.sqrt(occ[ok, m].astype(float)))
    if diagonal is not None:
        rows.append(np.arange(D))
        cols.append(np.arange(D))
        vals.append(np.asarray(diagonal, dtype=complex))
    if not rows:
        return sp.csr_matrix((D, D), dtype=complex)
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    v = np.concatenate([np.asarray(a, dtype=complex) for a in vals])
    return sp.csr_matrix((v, (r, c)), shape=(D, D))


def effective_hamiltonian(
    geometry: ChainGeometry, basis: SectorBasis, extra_detuning=None
) -> sp.csr_matrix:
    """Non-Hermitian effective Hamiltonian on ``basis``.

    ``H = sum_mn (J_mn - i Gamma_mn/2) a_m^dag a_n + sum_m (Delta_m - i gamma_nr/2) n_m
    - i gamma_dep sum_m n_m^2 - (U/2) sum_m n_m (n_m - 1)``.  For qubits the
    dephasing term reduces to ``-i gamma_dep n_m``.  ``extra_detuning`` adds a
    per-site detuning on top of the static one (used for switched detunings).
    """
    _check_sites(geometry, basis)
    cm = coupling_matrices(geometry)
    kernel = cm.kernel.copy()
    np.fill_diagonal(kernel, -0.5j * geometry.gamma_1d)
    return hamiltonian_matrix(kernel, basis, _diagonal_terms(geometry, basis, extra_detuning))


def jump_operators(geometry: ChainGeometry, basis: SectorBasis) -> list[sp.csr_matrix]:
    """Jump operators ``L_k`` with ``sum_k L_k rho L_k^dag`` equal to the decay dissipators.

    Returns the two collective waveguide operators (zero ones dropped) followed
    by ``sqrt(gamma_nr) a_m`` per site when ``gamma_nr > 0``.  Dephasing is not
    included here; it is diagonal and handled separately.
    """
    _check_sites(geometry, basis)
    amps = collective_decay_amplitudes(geometry)
    ops = []
    for row in amps:
        if np.any(row != 0):
            op = sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)
            for j, w in enumerate(row):
                if w != 0:
                    op = op + w * site_lowering(basis, j)
            ops.append(op.tocsr())
    if geometry.gamma_nr > 0:
        r = math.sqrt(geometry.gamma_nr)
        ops.extend((r * site_lowering(basis, j)).tocsr() for j in range(basis.n_sites))
    return ops


# -- drives -------------------------------------------------------------------


@dataclass(frozen=True)
class Rectangular:
    """Constant amplitude on ``[t_on, t_off)``; ``t_off`` may be ``inf``."""

    amplitude: float
    t_on: float = 0.0
    t_off: float = math.inf

    def __post_init__(self):
        if not (self.t_off > self.t_on):
            raise ParameterError("rectangular envelope needs t_off > t_on")
        if not math.isfinite(self.amplitude) or self.amplitude < 0:
            raise ParameterError("amplitude must be real and >= 0")

    def __call__(self, t: float) -> float:
        return self.amplitude if self.t_on <= t < self.t_off else 0.0

    def area(self) -> float:
        return self.amplitude * (self.t_off - self.t_on)

    def edges(self) -> tuple[float, ...]:
        return tuple(t for t in (self.t_on, self.t_off) if math.isfinite(t))

    def is_constant_on(self, t0: float, t1: float) -> bool:
        return True


@dataclass(frozen=True)
class Gaussian:
    """``peak * exp(-4 ln2 (t - center)^2 / fwhm^2)``."""

    peak: float
    center: float
    fwhm: float

    def __post_init__(self):
        if not self.fwhm > 0:
            raise ParameterError("gaussian envelope needs fwhm > 0")
        if not math.isfinite(self.peak) or self.peak < 0:
            raise ParameterError("peak amplitude must be real and >= 0")

    @classmethod
    def with_area(cls, area: float, center: float, fwhm: float) -> "Gaussian":
        return cls(area / (fwhm * math.sqrt(math.pi / (4 * math.log(2)))), center, fwhm)

    def __call__(self, t: float) -> float:
        return self.peak * math.exp(-4 * math.log(2) * ((t - self.center) / self.fwhm) ** 2)

    def area(self) -> float:
        return self.peak * self.fwhm * math.sqrt(math.pi / (4 * math.log(2)))

    def edges(self) -> tuple[float, ...]:
        return ()

    def is_constant_on(self, t0: float, t1: float) -> bool:
        return False


@dataclass(frozen=True)
class DrivePulse:
    """Classical drive.

    ``kind="local"`` drives ``targets`` with ``Omega(t) (a^dag e^{-i detuning t} + h.c.)``.
    ``kind="waveguide"`` drives every site with ``Omega(t) (a^dag + a)`` and adds
    the probe detuning ``detuning * sum_j n_j``.  Targets are 0-based.
    """

    kind: str
    envelope: Rectangular | Gaussian
    targets: tuple[int, ...] = ()
    detuning: float = 0.0

    def __post_init__(self):
        if self.kind not in ("local", "waveguide"):
            raise ParameterError(f"unknown drive kind {self.kind!r}")
        object.__setattr__(self, "targets", tuple(int(j) for j in self.targets))
        if self.kind == "local" and not self.targets:
            raise ParameterError("local drive needs at least one target site")
        if len(set(self.targets)) != len(self.targets):
            raise ParameterError("drive targets must be distinct")
        if not math.isfinite(self.detuning):
            raise ParameterError("drive detuning must be finite")

    def sites(self, n_sites: int) -> tuple[int, ...]:
        if self.kind == "waveguide":
            return tuple(range(n_sites))
        for j in self.targets:
            if not 0 <= j < n_sites:
                raise ParameterError(f"drive target {j} outside [0, {n_sites - 1}]")
        return self.targets

    def amplitude(self, t: float) -> float:
        return self.envelope(t)

    def carrier_phase(self, t: float) -> complex:
        """Factor multiplying the raising part at time ``t``."""
        if self.kind == "local" and self.detuning != 0.0:
            return complex(np.exp(-1j * self.detuning * t))
        return 1.0 + 0j


def drive_operator(pulse: DrivePulse, basis: SectorBasis) -> sp.csr_matrix:
    """Raising part ``sum_{j in targets} a_j^dag``."""
    sites = pulse.sites(basis.n_sites)
    op = sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)
    for j in sites:
        op = op + site_lowering(basis, j).T
    return op.tocsr()


def drive_generator(
    pulse: DrivePulse, geometry: ChainGeometry, basis: SectorBasis, t: float
) -> sp.csr_matrix:
    """Hermitian drive Hamiltonian at time ``t``."""
    _check_sites(geometry, basis)
    P = drive_operator(pulse, basis)
    z = pulse.amplitude(t) * pulse.carrier_phase(t)
    H = z * P + np.conj(z) * P.getH()
    if pulse.kind == "waveguide" and pulse.detuning != 0.0:
        H = H + pulse.detuning * sp.diags(basis.excitations.astype(complex))
    return sp.csr_matrix(H)
