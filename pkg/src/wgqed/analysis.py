"""Spectra, subradiance scans, spatial correlations and probe transmission."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as la
from scipy.integrate import trapezoid

from .dynamics import (
    EvolutionSchedule,
    evolve_detuning_sweep,
    field_operator,
    input_amplitude,
)
from .errors import EigenSolverError, ParameterError
from .hamiltonian import ChainGeometry, DrivePulse, Rectangular, coupling_matrices, effective_hamiltonian
from .hilbert import SectorBasis, StateVector, enumerate_basis

__all__ = [
    "DecaySpectrum",
    "ScanGrid",
    "CorrelationMap",
    "TransmissionCurve",
    "decay_spectrum",
    "min_decay_scan",
    "spatial_correlations",
    "transmission_spectrum",
    "dip_fwhm",
]


@dataclass(eq=False)
class DecaySpectrum:
    """Eigenpairs of one excitation sector, sorted by decay rate."""

    excitation: int
    eigenvalues: np.ndarray
    vectors: np.ndarray  # columns, on the sector's slice of ``basis``
    basis: SectorBasis

    @property
    def rates(self) -> np.ndarray:
        return -2.0 * self.eigenvalues.imag

    @property
    def shifts(self) -> np.ndarray:
        return self.eigenvalues.real

    def __len__(self) -> int:
        return self.eigenvalues.size

    def state(self, k: int) -> StateVector:
        """Eigenvector ``k`` embedded in the full truncated basis."""
        amps = np.zeros(self.basis.dimension, dtype=complex)
        amps[self.basis.sector(self.excitation)] = self.vectors[:, k]
        return StateVector(self.basis, amps)


@dataclass(eq=False)
class ScanGrid:
    """Minimal decay rates on an (N, d) grid; failed cells hold NaN."""

    n_values: np.ndarray
    d_values: np.ndarray
    values: np.ndarray
    excitation: int
    failures: dict = field(default_factory=dict)

    def rows(self):
        for i, n in enumerate(self.n_values):
            for j, d in enumerate(self.d_values):
                yield int(n), float(d), float(self.values[i, j])


@dataclass(eq=False)
class CorrelationMap:
    matrix: np.ndarray

    @property
    def n_sites(self) -> int:
        return self.matrix.shape[0]

    def argmax_pair(self) -> tuple[int, int]:
        i, j = np.unravel_index(int(np.argmax(np.triu(self.matrix, 1))), self.matrix.shape)
        return int(i), int(j)


@dataclass(eq=False)
class TransmissionCurve:
    detunings: np.ndarray
    transmission: np.ndarray
    metadata: dict = field(default_factory=dict)

    def fwhm(self) -> float:
        return dip_fwhm(self.detunings, self.transmission)


def _fix_phase(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    ph = vecs[idx, np.arange(vecs.shape[1])]
    ph = ph / np.abs(ph)
    return vecs / ph


def _sector_block(geometry: ChainGeometry, M: int, local_dim: int) -> tuple[np.ndarray, SectorBasis]:
    basis = enumerate_basis(geometry.n_sites, local_dim, M)
    sl = basis.sector(M)
    H = effective_hamiltonian(geometry, basis)
    return H[sl, sl].toarray(), basis


def _eig(block: np.ndarray, vectors: bool = True):
    try:
        if not np.all(np.isfinite(block)):
            raise la.LinAlgError("matrix has non-finite entries")
        if vectors:
            return la.eig(block)
        return la.eigvals(block), None
    except (la.LinAlgError, ValueError) as exc:
        try:
            cond = float(np.linalg.cond(block))
        except Exception:
            cond = float("nan")
        raise EigenSolverError(f"eigendecomposition failed: {exc}", cond) from exc


def decay_spectrum(geometry: ChainGeometry, M: int, local_dim: int = 2) -> DecaySpectrum:
    """All eigenpairs of the ``M``-excitation block of the effective Hamiltonian.

    Eigenvectors are normalized with their largest component real and positive.
    """
    if not 1 <= M <= geometry.n_sites * (local_dim - 1):
        raise ParameterError(f"excitation number {M} outside the sector range")
    block, basis = _sector_block(geometry, M, local_dim)
    w, v = _eig(block)
    v = _fix_phase(v / np.linalg.norm(v, axis=0))
    order = np.lexsort((w.real, np.round(-2 * w.imag, 12)))
    return DecaySpectrum(M, w[order], v[:, order], basis)


def _min_rate(N: int, d: float, M: int, geometry_kwargs: dict) -> float:
    geo = ChainGeometry.regular(N, d, **geometry_kwargs)
    if M == 1:
        # single-excitation block is the coupling kernel itself
        block = coupling_matrices(geo).kernel.copy()
        block[np.diag_indices(N)] += geo.detunings - 0.5j * (geo.gamma_nr + 2 * geo.gamma_dep)
    else:
        block, _ = _sector_block(geo, M, 2)
    w, _ = _eig(block, vectors=False)
    return max(float((-2 * w.imag).min()), 0.0)


def min_decay_scan(
    n_values: Sequence[int],
    d_values: Sequence[float],
    M: int = 1,
    threads: int | None = None,
    **geometry_kwargs,
) -> ScanGrid:
    """Smallest decay rate of the ``M``-excitation sector on every ``(N, d)`` cell.

    Rates are reported in units of the uniform waveguide coupling.  Cells whose
    eigensolve fails hold NaN and are listed in ``failures``.
    """
    n_values = np.asarray(n_values, dtype=int)
    d_values = np.asarray(d_values, dtype=float)
    if n_values.size == 0 or d_values.size == 0:
        raise ParameterError("scan axes must be nonempty")
    if np.any(n_values < M):
        raise ParameterError("every N must be >= M")
    gamma = float(geometry_kwargs.get("gamma_1d", 1.0))
    cells = [(i, j) for i in range(n_values.size) for j in range(d_values.size)]

    def task(cell):
        i, j = cell
        try:
            return cell, _min_rate(int(n_values[i]), float(d_values[j]), M, geometry_kwargs) / gamma, None
        except EigenSolverError as exc:
            return cell, float("nan"), f"{exc} (condition {exc.condition:.3g})"

    workers = threads or os.cpu_count() or 1
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(task, cells))
    else:
        results = [task(c) for c in cells]
    values = np.full((n_values.size, d_values.size), np.nan)
    failures = {}
    for (i, j), val, err in results:
        values[i, j] = val
        if err is not None:
            failures[(int(n_values[i]), float(d_values[j]))] = err
    return ScanGrid(n_values, d_values, values, M, failures)


def spatial_correlations(state: StateVector) -> CorrelationMap:
    """``C[n, m] = |<e_n e_m|psi>|^2`` over the two-excitation configurations.

    For bosonic bases the diagonal holds the double occupation ``|<2_n|psi>|^2``.
    """
    basis = state.basis
    N = basis.n_sites
    C = np.zeros((N, N))
    if basis.max_excitation < 2:
        return CorrelationMap(C)
    sl = basis.sector(2)
    occ = basis.states[sl]
    p = np.abs(state.amplitudes[sl]) ** 2
    for row, w in zip(occ, p):
        sites = np.flatnonzero(row)
        if sites.size == 2:
            C[sites[0], sites[1]] = C[sites[1], sites[0]] = w
        else:
            C[sites[0], sites[0]] = w
    return CorrelationMap(C)


def dip_fwhm(
    detunings: np.ndarray, transmission: np.ndarray, baseline: float = 1.0, min_depth: float = 1e-6
) -> float:
    """Full width of the transmission dip at half depth below ``baseline``.

    Crossings are located by linear interpolation.  NaN when a side never
    crosses or the dip is shallower than ``min_depth``.
    """
    x = np.asarray(detunings, dtype=float)
    y = np.asarray(transmission, dtype=float)
    k = int(np.argmin(y))
    level = 0.5 * (baseline + y[k])
    if baseline - y[k] <= min_depth:
        return float("nan")

    def crossing(indices):
        prev = k
        for i in indices:
            if y[i] >= level:
                x0, x1, y0, y1 = x[prev], x[i], y[prev], y[i]
                return x0 + (level - y0) * (x1 - x0) / (y1 - y0)
            prev = i
        return float("nan")

    left = crossing(range(k - 1, -1, -1))
    right = crossing(range(k + 1, x.size))
    return float(right - left)


def transmission_spectrum(
    initial: StateVector,
    geometry: ChainGeometry,
    probe: DrivePulse,
    duration: float,
    detunings: Sequence[float] | None = None,
    samples: int = 101,
    method: str = "auto",
) -> TransmissionCurve:
    """Probe transmission ``<E^dag E> / |E_in|^2`` versus probe detuning.

    Each point evolves ``initial`` under the rectangular waveguide probe and
    averages the transmitted intensity over the second half of the window.
    The default grid has 161 detunings spanning ``+-1.5 N Gamma``.
    """
    if probe.kind != "waveguide":
        raise ParameterError("transmission needs a waveguide probe")
    if not duration > 0:
        raise ParameterError("probe duration must be positive")
    omega = float(probe.amplitude(0.5 * duration))
    if omega <= 0:
        raise ParameterError("probe amplitude must be positive during the window")
    N = geometry.n_sites
    gamma = float(geometry.gamma_1d[0])
    if detunings is None:
        detunings = np.linspace(-1.5 * N * gamma, 1.5 * N * gamma, 161)
    detunings = np.asarray(detunings, dtype=float)
    basis = initial.basis
    A = field_operator(geometry, basis)
    obs = {"field": A, "intensity": (A.getH() @ A).tocsr()}
    times = np.linspace(0.5 * duration, duration, samples)
    pulse = DrivePulse("waveguide", Rectangular(omega, 0.0, duration), (), 0.0)
    sched = EvolutionSchedule(duration, times, pulses=(pulse,))
    series = evolve_detuning_sweep(initial, sched, geometry, obs, detunings, method=method)
    e_in = input_amplitude(omega, geometry)
    T = np.empty(detunings.size)
    for k, ts in enumerate(series):
        inst = abs(e_in) ** 2 + 2 * np.real(np.conj(e_in) * 1j * ts["field"]) + ts["intensity"]
        T[k] = trapezoid(inst, times) / (times[-1] - times[0]) / abs(e_in) ** 2
    meta = {
        "probe_amplitude": omega,
        "duration": float(duration),
        "n_sites": N,
        "engine": series[0].metadata.get("engine"),
    }
    if omega > 0.1 * gamma:
        meta["warning"] = f"probe amplitude {omega:g} exceeds the weak-drive limit 0.1"
    return TransmissionCurve(detunings, T, meta)
