"""Lindblad master-equation dynamics with correlated waveguide decay.

    d rho/dt = -i (H rho - rho H^dag) + sum_mn Gamma_mn a_m rho a_n^dag
               + gamma_nr sum_m a_m rho a_m^dag + 2 gamma_dep sum_m n_m rho n_m

with ``H`` the effective Hamiltonian plus the (Hermitian) drive.  Two engines
integrate it: a dense one on the truncated sector basis and, when the chain
splits into interchangeable site groups, one on the permutation-symmetric
representation of :mod:`wgqed.symmetric`.  Both use an adaptive 4(5)
Runge-Kutta pair between the schedule's breakpoints.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.integrate import solve_ivp

from .errors import (
    BasisMismatchError,
    NotSymmetricError,
    NumericalError,
    ParameterError,
    StiffnessError,
)
from .hamiltonian import (
    ChainGeometry,
    DrivePulse,
    coupling_matrices,
    drive_operator,
    effective_hamiltonian,
    jump_operators,
    snapped_cos_sin,
)
from .hilbert import SectorBasis, StateVector, site_lowering
from .symmetric import SymmetricSpace, SymmetricState

__all__ = [
    "DensityState",
    "DetuningStep",
    "EvolutionSchedule",
    "TimeSeries",
    "lindblad_derivative",
    "expectation",
    "field_operator",
    "output_field_intensity",
    "input_amplitude",
    "projector",
    "symmetric_groups",
    "evolve",
    "evolve_detuning_sweep",
]

RTOL = 1e-8
ATOL = 1e-10
TRACE_TOL = 1e-8
HERMITIAN_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DensityState:
    """Density matrix on a :class:`SectorBasis`."""

    basis: SectorBasis
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=complex)
        D = self.basis.dimension
        if m.shape != (D, D):
            raise BasisMismatchError(f"density matrix of shape {m.shape} does not fit dimension {D}")
        if not np.all(np.isfinite(m)):
            raise ParameterError("density matrix has non-finite entries")
        if np.abs(m - m.conj().T).max(initial=0.0) > 1e-12 * max(1.0, np.abs(m).max(initial=0.0)):
            raise ParameterError("density matrix is not Hermitian")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def from_pure(cls, state: StateVector) -> "DensityState":
        return cls(state.basis, state.density_matrix())

    @classmethod
    def ground(cls, basis: SectorBasis) -> "DensityState":
        m = np.zeros((basis.dimension, basis.dimension), dtype=complex)
        m[0, 0] = 1.0
        return cls(basis, m)

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def expectation(self, op) -> complex:
        return expectation(self, op)

    def fidelity(self, state: StateVector) -> float:
        """``<psi|rho|psi>``."""
        if not state.basis.same_as(self.basis):
            raise BasisMismatchError("state and density matrix live on different bases")
        psi = state.amplitudes
        return float(np.real(np.vdot(psi, self.matrix @ psi)))

    def populations(self) -> np.ndarray:
        """Mean occupation of every site."""
        p = np.real(np.diag(self.matrix))
        return p @ self.basis.states

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.matrix).min())


def expectation(rho, op) -> complex:
    """``Tr(op rho)`` for a :class:`DensityState` or symmetric state."""
    if isinstance(rho, SymmetricState):
        return rho.expectation(op)
    D = rho.basis.dimension
    if op.shape != (D, D):
        raise BasisMismatchError("operator does not act on the state's basis")
    if sp.issparse(op):
        coo = op.tocoo()
        return complex(np.sum(coo.data * rho.matrix[coo.col, coo.row]))
    return complex(np.sum(np.asarray(op).T * rho.matrix))


def projector(state: StateVector) -> sp.csr_matrix:
    """Sparse ``|psi><psi|`` restricted to the support of ``psi``."""
    amps = state.amplitudes
    idx = np.flatnonzero(amps)
    r, c = np.meshgrid(idx, idx, indexing="ij")
    vals = np.outer(amps[idx], amps[idx].conj())
    D = state.basis.dimension
    return sp.csr_matrix((vals.ravel(), (r.ravel(), c.ravel())), shape=(D, D))


def field_operator(geometry: ChainGeometry, basis: SectorBasis) -> sp.csr_matrix:
    """Scattered-field operator ``A = sum_j sqrt(Gamma_j / 2) a_j``.

    The field in the waveguide is ``E = E_in + i A``.
    """
    if geometry.n_sites != basis.n_sites:
        raise BasisMismatchError("geometry and basis site counts differ")
    op = sp.csr_matrix((basis.dimension, basis.dimension), dtype=complex)
    for j, g in enumerate(geometry.gamma_1d):
        if g > 0:
            op = op + math.sqrt(g / 2) * site_lowering(basis, j)
    return op.tocsr()


def input_amplitude(rabi: float, geometry: ChainGeometry) -> float:
    """Coherent input amplitude that produces the waveguide Rabi frequency ``rabi``.

    Sign convention: ``E_in = -rabi / sqrt(Gamma_ref / 2)`` with ``Gamma_ref`` the
    first site's coupling, so that a single resonant qubit reflects a weak
    probe completely.
    """
    ref = float(geometry.gamma_1d[0])
    if ref <= 0:
        raise ParameterError("reference coupling must be positive")
    return -rabi / math.sqrt(ref / 2)


def output_field_intensity(rho, geometry: ChainGeometry, input_amplitude: complex = 0.0) -> float:
    """``<E^dag E>`` with ``E = E_in + i sum_j sqrt(Gamma_j/2) a_j``."""
    A = field_operator(geometry, rho.basis)
    a = expectation(rho, A)
    ada = expectation(rho, (A.getH() @ A).tocsr())
    e = complex(input_amplitude)
    return float(abs(e) ** 2 + 2 * np.real(np.conj(e) * 1j * a) + ada.real)


def lindblad_derivative(rho: DensityState, H_total, geometry: ChainGeometry) -> np.ndarray:
    """Right-hand side of the master equation for a fixed total Hamiltonian."""
    basis = rho.basis
    if H_total.shape != (basis.dimension, basis.dimension):
        raise BasisMismatchError("Hamiltonian does not act on the state's basis")
    r = rho.matrix
    Hr = H_total @ r
    Hd = H_total.getH() if sp.issparse(H_total) else np.asarray(H_total).conj().T
    out = -1j * (Hr - (Hd.T @ r.T).T)
    for L in jump_operators(geometry, basis):
        out += L @ (L @ r.conj().T).conj().T
    if geometry.gamma_dep > 0:
        occ = basis.states.astype(float)
        out += 2 * geometry.gamma_dep * (occ @ occ.T) * r
    return np.asarray(out)


# -- schedules and results ------------------------------------------------------


@dataclass(frozen=True)
class DetuningStep:
    """Add ``value`` to the detuning of ``sites`` from ``time`` onwards."""

    sites: tuple[int, ...]
    value: float
    time: float

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(int(j) for j in self.sites))
        if not self.sites:
            raise ParameterError("detuning step needs at least one site")
        if not (math.isfinite(self.value) and math.isfinite(self.time)):
            raise ParameterError("detuning step value and time must be finite")


@dataclass(frozen=True, eq=False)
class EvolutionSchedule:
    """Drives, detuning steps, total duration and the output time grid."""

    duration: float
    times: np.ndarray
    pulses: tuple[DrivePulse, ...] = ()
    detuning_steps: tuple[DetuningStep, ...] = ()

    def __post_init__(self):
        if not (math.isfinite(self.duration) and self.duration >= 0):
            raise ParameterError("duration must be finite and >= 0")
        t = np.asarray(self.times, dtype=float).reshape(-1)
        if t.size == 0:
            raise ParameterError("time grid is empty")
        if np.any(np.diff(t) < 0):
            raise ParameterError("time grid must be nondecreasing")
        if t[0] < 0 or t[-1] > self.duration * (1 + 1e-12):
            raise ParameterError("time grid must lie within [0, duration]")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "pulses", tuple(self.pulses))
        object.__setattr__(self, "detuning_steps", tuple(self.detuning_steps))

    @classmethod
    def uniform(cls, duration: float, samples: int = 201, **kwargs) -> "EvolutionSchedule":
        return cls(duration, np.linspace(0.0, duration, samples), **kwargs)

    def breakpoints(self) -> list[float]:
        pts = {0.0, float(self.duration)}
        for p in self.pulses:
            pts.update(e for e in p.envelope.edges() if 0 < e < self.duration)
        pts.update(s.time for s in self.detuning_steps if 0 < s.time < self.duration)
        return sorted(pts)

    def extra_detuning(self, t: float, n_sites: int) -> np.ndarray:
        """Per-site detuning added by the steps that are active at ``t``."""
        out = np.zeros(n_sites)
        for s in self.detuning_steps:
            if t >= s.time:
                out[list(s.sites)] += s.value
        return out

    def with_pulses(self, pulses) -> "EvolutionSchedule":
        return EvolutionSchedule(self.duration, self.times, tuple(pulses), self.detuning_steps)


@dataclass(eq=False)
class TimeSeries:
    """Sampled observables; every channel has one entry per time."""

    times: np.ndarray
    channels: dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    final: object = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        for k, v in self.channels.items():
            v = np.asarray(v)
            if v.shape[0] != self.times.size:
                raise ParameterError(f"channel {k!r} has {v.shape[0]} samples for {self.times.size} times")
            self.channels[k] = v

    def __getitem__(self, name: str) -> np.ndarray:
        return self.channels[name]

    def __contains__(self, name: str) -> bool:
        return name in self.channels


# -- engines ---------------------------------------------------------------------


def _is_hermitian(op) -> bool:
    if isinstance(op, StateVector):
        return True
    diff = op - op.getH() if sp.issparse(op) else np.asarray(op) - np.asarray(op).conj().T
    if sp.issparse(diff):
        return diff.count_nonzero() == 0 or abs(diff).max() < 1e-14
    return np.abs(diff).max(initial=0.0) < 1e-14


def _active(pulses: Sequence[DrivePulse], t0: float, t1: float) -> list[DrivePulse]:
    mid = 0.5 * (t0 + t1)
    out = []
    for p in pulses:
        env = p.envelope
        if hasattr(env, "t_on") and not (env.t_on <= mid < env.t_off):
            continue
        if getattr(env, "amplitude", getattr(env, "peak", 0.0)) == 0.0:
            continue
        out.append(p)
    return out


class _SectorEngine:
    """Dense density matrix with sector-blocked Hamiltonian products."""

    def __init__(self, basis: SectorBasis, geometry: ChainGeometry, schedule: EvolutionSchedule):
        self.basis = basis
        self.geometry = geometry
        self.schedule = schedule
        D = basis.dimension
        self.D = D
        self.H0 = effective_hamiltonian(geometry, basis)
        wg = sum(p.detuning for p in schedule.pulses if p.kind == "waveguide")
        self.static_diag = wg * basis.excitations.astype(float)
        self.occ = basis.states.astype(float)
        ops = jump_operators(geometry, basis)
        self.n_jumps = len(ops)
        if ops:
            self.Lstack = sp.vstack(ops).tocsr()
            self.Lcat = sp.hstack(ops).tocsr()
        self.deph = None
        if geometry.gamma_dep > 0:
            self.deph = 2 * geometry.gamma_dep * (self.occ @ self.occ.T)
        self.drives = {id(p): (p, drive_operator(p, basis)) for p in schedule.pulses}
        self.sectors = [basis.sector(m) for m in range(basis.max_excitation + 1)]

    def segment(self, t0: float, t1: float, wg_shift: float = 0.0):
        extra = self.schedule.extra_detuning(0.5 * (t0 + t1), self.basis.n_sites)
        diag = self.occ @ extra + self.static_diag + wg_shift * self.basis.excitations
        H = self.H0 + sp.diags(diag.astype(complex))
        H = H.tocsr()
        blocks = [(q, H[q, q].toarray()) for q in self.sectors]
        drives = []
        fixed = None
        for p in _active(self.schedule.pulses, t0, t1):
            _, P = self.drives[id(p)]
            if p.envelope.is_constant_on(t0, t1) and p.carrier_phase(1.0) == 1.0:
                z = p.amplitude(0.5 * (t0 + t1))
                V = (z * P + z * P.T).tocsr()
                fixed = V if fixed is None else (fixed + V).tocsr()
            else:
                drives.append((p, P, P.T.tocsr()))  # P is real: P^dag = P^T
        D = self.D
        k = self.n_jumps
        zbuf = np.empty((k, D, D), dtype=complex) if k else None

        def rhs(t, y):
            r = y.reshape(D, D)
            X = np.empty_like(r)
            for q, B in blocks:
                np.matmul(B, r[q], out=X[q])
            if fixed is not None:
                X += fixed @ r
            for p, P, Pt in drives:
                z = p.amplitude(t) * p.carrier_phase(t)
                if z != 0:
                    X += z * (P @ r) + np.conj(z) * (Pt @ r)
            X *= -1j
            out = X + X.conj().T
            if k:
                Y = (self.Lstack @ r).reshape(k, D, D)
                np.conjugate(Y.transpose(0, 2, 1), out=zbuf)
                J = self.Lcat @ zbuf.reshape(k * D, D)
                # keep the step exactly Hermitian; RK45 otherwise amplifies round-off
                out += 0.5 * (J + J.conj().T)
            if self.deph is not None:
                out += self.deph * r
            return out.ravel()

        return rhs


class _SymmetricEngine:
    """Superoperator on the permutation-symmetric representation."""

    def __init__(self, space: SymmetricSpace, geometry: ChainGeometry, schedule: EvolutionSchedule):
        self.space = space
        self.geometry = geometry
        self.schedule = schedule
        sp_ = space
        G = len(sp_.groups)
        rep = [g[0] for g in sp_.groups]
        cm = coupling_matrices(geometry)
        kernel = cm.kernel
        gam = cm.Gamma
        a = np.zeros((G, G), dtype=complex)
        Gm = np.zeros((G, G))
        for g, mg in enumerate(sp_.groups):
            for h, mh in enumerate(sp_.groups):
                if g == h:
                    if len(mg) > 1:
                        a[g, g] = kernel[mg[0], mg[1]]
                        Gm[g, g] = gam[mg[0], mg[1]]
                    else:
                        Gm[g, g] = gam[mg[0], mg[0]]
                else:
                    a[g, h] = kernel[mg[0], mh[0]]
                    Gm[g, h] = gam[mg[0], mh[0]]
        gnr, gdep = geometry.gamma_nr, geometry.gamma_dep
        b = np.array(
            [geometry.detunings[r] - 0.5j * geometry.gamma_1d[r] - 0.5j * (gnr + 2 * gdep) for r in rep]
        )
        Ls = [sp_.left(g, "S") for g in range(G)]
        Ld = [sp_.left(g, "Sd") for g in range(G)]
        Ln = [sp_.left(g, "N") for g in range(G)]
        Rs = [sp_.right(g, "S") for g in range(G)]
        Rd = [sp_.right(g, "Sd") for g in range(G)]
        Rn = [sp_.right(g, "N") for g in range(G)]
        n = sp_.dimension
        L = sp.csr_matrix((n, n), dtype=complex)
        for g in range(G):
            L = L - 1j * (a[g, g] * (Ld[g] @ Ls[g] - Ln[g]) + b[g] * Ln[g])
            L = L + 1j * (np.conj(a[g, g]) * (Rs[g] @ Rd[g] - Rn[g]) + np.conj(b[g]) * Rn[g])
            for h in range(G):
                if h != g:
                    L = L - 1j * a[g, h] * (Ld[g] @ Ls[h])
                    L = L + 1j * np.conj(a[g, h]) * (Rs[g] @ Rd[h])
                if Gm[g, h] != 0:
                    L = L + Gm[g, h] * (Ls[g] @ Rd[h])
            c = geometry.gamma_1d[rep[g]] - Gm[g, g] + gnr
            if abs(c) > 1e-15:
                L = L + c * sp_.local_decay(g)
            if gdep > 0:
                L = L + sp.diags(2 * gdep * sp_.local_dephasing(g).astype(complex))
        self.L0 = L.tocsr()
        self.number_diag = [(-1j * (Ln[g].diagonal() - Rn[g].diagonal())) for g in range(G)]
        self.total_number_diag = -1j * (sp_.ket_exc - sp_.bra_exc).astype(complex)
        self.site_group = {j: g for g, mg in enumerate(sp_.groups) for j in mg}
        self.drives = {}
        for p in schedule.pulses:
            gs = sorted({self.site_group[j] for j in p.sites(geometry.n_sites)})
            up = sum((Ld[g] - Rd[g] for g in gs), sp.csr_matrix((n, n), dtype=complex))
            down = sum((Ls[g] - Rs[g] for g in gs), sp.csr_matrix((n, n), dtype=complex))
            self.drives[id(p)] = (p, (-1j * up).tocsr(), (-1j * down).tocsr())
        self.wg = sum(p.detuning for p in schedule.pulses if p.kind == "waveguide")
        self.swap = sp_.lookup(sp_.elements[:, :, [0, 2, 1, 3]])

    def _group_detuning(self, t: float) -> np.ndarray:
        extra = self.schedule.extra_detuning(t, self.geometry.n_sites)
        return np.array([extra[g[0]] for g in self.space.groups])

    def segment(self, t0: float, t1: float, sweep: np.ndarray | None = None):
        diag = self.wg * self.total_number_diag
        for g, d in enumerate(self._group_detuning(0.5 * (t0 + t1))):
            if d != 0:
                diag = diag + d * self.number_diag[g]
        drives = []
        const = self.L0 + sp.diags(diag)
        for p in _active(self.schedule.pulses, t0, t1):
            _, up, down = self.drives[id(p)]
            if p.envelope.is_constant_on(t0, t1) and p.carrier_phase(1.0) == 1.0:
                Om = p.amplitude(0.5 * (t0 + t1))
                const = const + Om * (up + down)
            else:
                drives.append((p, up, down))
        const = const.tocsr()
        swap = self.swap
        # the generator commutes with rho -> rho^dag; projecting each derivative
        # onto the Hermitian part stops RK45 from amplifying round-off there
        if sweep is None:
            def rhs(t, y):
                out = const @ y
                for p, up, down in drives:
                    z = p.amplitude(t) * p.carrier_phase(t)
                    out += z * (up @ y) + np.conj(z) * (down @ y)
                return 0.5 * (out + np.conj(out[swap]))
            return rhs

        nb = sweep.size
        n = self.space.dimension
        sweep_diag = self.total_number_diag[:, None] * sweep[None, :]

        def rhs_batch(t, y):
            V = y.reshape(n, nb)
            out = const @ V
            out += sweep_diag * V
            for p, up, down in drives:
                z = p.amplitude(t) * p.carrier_phase(t)
                out += z * (up @ V) + np.conj(z) * (down @ V)
            return (0.5 * (out + np.conj(out[swap]))).ravel()

        return rhs_batch


def symmetric_groups(
    geometry: ChainGeometry,
    schedule: EvolutionSchedule | None = None,
    site_labels: Sequence | None = None,
) -> list[tuple[int, ...]] | None:
    """Partition of the sites into interchangeable groups, or ``None``.

    Sites are grouped by coupling phase, coupling strength, detuning and by
    membership in every drive and detuning step, plus optional ``site_labels``
    (for instance the initial populations); the grouping is accepted only
    if the coupling kernel is constant between and within groups.
    """
    N = geometry.n_sites
    c, s = snapped_cos_sin(geometry.positions)
    sigs = []
    for j in range(N):
        sig = [round(float(c[j]), 12), round(float(s[j]), 12), float(geometry.gamma_1d[j]), float(geometry.detunings[j])]
        if schedule is not None:
            sig += [j in p.sites(N) for p in schedule.pulses]
            sig += [j in st.sites for st in schedule.detuning_steps]
        if site_labels is not None:
            sig.append(site_labels[j])
        sigs.append(tuple(sig))
    order: dict = {}
    for j, sig in enumerate(sigs):
        order.setdefault(sig, []).append(j)
    groups = [tuple(v) for v in order.values()]
    cm = coupling_matrices(geometry)
    K = cm.kernel
    scale = max(1.0, np.abs(K).max())
    for g in groups:
        for h in groups:
            block = K[np.ix_(g, h)]
            if g == h:
                if len(g) > 1:
                    off = block[~np.eye(len(g), dtype=bool)]
                    if np.abs(off - off[0]).max() > 1e-13 * scale:
                        return None
            elif np.abs(block - block[0, 0]).max() > 1e-13 * scale:
                return None
    return groups


def _swap_classes(basis: SectorBasis, rho, psi) -> list[int]:
    """Class label per site: sites share a label when swapping them leaves the
    one-body density matrix ``<a_i^dag a_j>`` unchanged."""
    N = basis.n_sites
    low = [site_lowering(basis, j) for j in range(N)]
    if psi is not None:
        v = np.array([op @ psi.amplitudes for op in low])
        G = v.conj() @ v.T
    else:
        G = np.empty((N, N), dtype=complex)
        for j in range(N):
            X = low[j] @ rho.matrix
            for i in range(N):
                G[i, j] = low[i].conj().multiply(X).sum()
    tol = 1e-10 * max(1.0, np.abs(G).max())
    labels = list(range(N))
    for i in range(N):
        if labels[i] != i:
            continue
        for j in range(i + 1, N):
            if labels[j] != j:
                continue
            perm = np.arange(N)
            perm[[i, j]] = [j, i]
            if np.abs(G[np.ix_(perm, perm)] - G).max() <= tol:
                labels[j] = i
    return labels


def _prepare_initial(initial) -> tuple[SectorBasis, DensityState | None, StateVector | None]:
    if isinstance(initial, StateVector):
        return initial.basis, None, initial
    if isinstance(initial, DensityState):
        return initial.basis, initial, None
    raise ParameterError("initial state must be a StateVector or DensityState")


def _choose_engine(initial, schedule, geometry, method):
    basis, rho, psi = _prepare_initial(initial)
    if geometry.n_sites != basis.n_sites:
        raise BasisMismatchError("geometry and initial state have different site counts")
    if method not in ("auto", "sector", "symmetric"):
        raise ParameterError(f"unknown method {method!r}")
    if method != "sector" and basis.local_dim == 2:
        groups = symmetric_groups(geometry, schedule, _swap_classes(basis, rho, psi))
        if groups is not None:
            space = SymmetricSpace(groups, basis.max_excitation)
            if method == "symmetric" or space.dimension < basis.dimension**2:
                try:
                    if psi is not None:
                        v0 = space.from_pure(psi)
                    else:
                        v0 = space.from_density(rho.matrix, basis)
                    return "symmetric", space, v0, basis
                except NotSymmetricError:
                    if method == "symmetric":
                        raise
    if method == "symmetric":
        raise NotSymmetricError("problem has no usable permutation symmetry")
    r0 = rho.matrix if rho is not None else psi.density_matrix()
    return "sector", None, r0, basis


def _observable_evaluators(kind, space, basis, observables):
    evals = {}
    real = {}
    for name, op in observables.items():
        real[name] = _is_hermitian(op)
        if kind == "symmetric":
            if isinstance(op, StateVector):
                w = space.state_functional(op)
            else:
                w = space.operator_functional(op, basis)
            evals[name] = (lambda w: (lambda y: w @ y))(w)
        else:
            if isinstance(op, StateVector):
                psi = op.amplitudes
                idx = np.flatnonzero(psi)
                ps = psi[idx]
                evals[name] = (lambda idx, ps: (lambda r: np.vdot(ps, r[np.ix_(idx, idx)] @ ps)))(idx, ps)
            else:
                coo = sp.coo_matrix(op)
                evals[name] = (lambda c: (lambda r: np.sum(c.data * r[c.col, c.row])))(coo)
    return evals, real


def _segments(schedule: EvolutionSchedule):
    bps = schedule.breakpoints()
    return [(a, b) for a, b in zip(bps[:-1], bps[1:]) if b > a]


def _integrate(rhs_for_segment, y0, schedule, sample, rtol, atol):
    """Run the piecewise integration, calling ``sample(i, y)`` for each grid time."""
    times = schedule.times
    done = np.zeros(times.size, dtype=bool)
    y = y0
    hit0 = np.flatnonzero(times == 0.0)
    for i in hit0:
        sample(i, y)
        done[i] = True
    nfev = 0
    for t0, t1 in _segments(schedule):
        idx = np.flatnonzero(~done & (times > t0) & (times <= t1))
        t_eval = np.unique(np.concatenate([times[idx], [t1]]))
        rhs = rhs_for_segment(t0, t1)
        sol = solve_ivp(rhs, (t0, t1), y, method="RK45", rtol=rtol, atol=atol, t_eval=t_eval)
        nfev += sol.nfev
        if sol.status != 0:
            reached = float(sol.t[-1]) if sol.t.size else t0
            raise StiffnessError(f"integration failed: {sol.message}", reached)
        for i in idx:
            k = int(np.searchsorted(t_eval, times[i]))
            sample(i, sol.y[:, k])
            done[i] = True
        y = sol.y[:, -1]
    return y, nfev


def evolve(
    initial,
    schedule: EvolutionSchedule,
    geometry: ChainGeometry,
    observables: Mapping[str, object] | None = None,
    *,
    method: str = "auto",
    rtol: float = RTOL,
    atol: float = ATOL,
    check_invariants: bool = True,
) -> TimeSeries:
    """Integrate the master equation and sample observables on ``schedule.times``.

    ``initial`` is a :class:`StateVector` or :class:`DensityState`.  Each
    observable is an operator on the initial state's basis (giving ``Tr(O rho)``)
    or a :class:`StateVector` (giving the fidelity ``<psi|rho|psi>``).  Channels of
    Hermitian observables are real.  ``method`` selects the sector engine, the
    permutation-symmetric engine, or picks automatically.

    Raises :class:`StiffnessError` when the integrator fails and
    :class:`NumericalError` when trace or Hermiticity drift beyond tolerance.
    """
    observables = dict(observables or {})
    kind, space, y0, basis = _choose_engine(initial, schedule, geometry, method)
    for name, op in observables.items():
        shape = (op.basis.dimension,) * 2 if isinstance(op, StateVector) else op.shape
        if shape != (basis.dimension, basis.dimension):
            raise BasisMismatchError(f"observable {name!r} does not act on the state's basis")
    evals, real = _observable_evaluators(kind, space, basis, observables)
    nt = schedule.times.size
    data = {k: np.zeros(nt, dtype=complex) for k in observables}
    drift = {"trace": 0.0, "hermiticity": 0.0}

    if kind == "symmetric":
        engine = _SymmetricEngine(space, geometry, schedule)
        tr = space.trace_functional
        swap = space.lookup(space.elements[:, :, [0, 2, 1, 3]])

        def sample(i, y):
            for k, f in evals.items():
                data[k][i] = f(y)
            if check_invariants:
                drift["trace"] = max(drift["trace"], abs(tr @ y - 1))
                drift["hermiticity"] = max(drift["hermiticity"], np.abs(y - np.conj(y[swap])).max())

        rhs_for = engine.segment
    else:
        engine = _SectorEngine(basis, geometry, schedule)
        D = basis.dimension
        y0 = np.ascontiguousarray(y0).ravel()

        def sample(i, y):
            r = y.reshape(D, D)
            for k, f in evals.items():
                data[k][i] = f(r)
            if check_invariants:
                drift["trace"] = max(drift["trace"], abs(np.trace(r) - 1))
                drift["hermiticity"] = max(drift["hermiticity"], np.abs(r - r.conj().T).max())

        rhs_for = engine.segment

    y, nfev = _integrate(rhs_for, y0, schedule, sample, rtol, atol)
    if check_invariants and (drift["trace"] > TRACE_TOL or drift["hermiticity"] > HERMITIAN_TOL):
        raise NumericalError(
            f"invariant drift: trace {drift['trace']:.3e}, hermiticity {drift['hermiticity']:.3e}"
        )
    channels = {k: (v.real.copy() if real[k] else v) for k, v in data.items()}
    if kind == "symmetric":
        final = SymmetricState(space, y, basis)
    else:
        final = DensityState(basis, _hermitize(y.reshape(basis.dimension, basis.dimension)))
    meta = {
        "engine": kind,
        "dimension": int(space.dimension if kind == "symmetric" else basis.dimension**2),
        "nfev": int(nfev),
        "trace_drift": float(drift["trace"]),
        "hermiticity_drift": float(drift["hermiticity"]),
    }
    return TimeSeries(schedule.times.copy(), channels, meta, final)


def _hermitize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.conj().T)


def evolve_detuning_sweep(
    initial,
    schedule: EvolutionSchedule,
    geometry: ChainGeometry,
    observables: Mapping[str, object],
    detunings: Sequence[float],
    *,
    method: str = "auto",
    rtol: float = RTOL,
    atol: float = ATOL,
) -> list[TimeSeries]:
    """Evolve once per probe detuning, replacing every waveguide pulse's detuning.

    On the symmetric engine all detunings are integrated together as one batch.
    """
    detunings = np.asarray(detunings, dtype=float)
    wg = [p for p in schedule.pulses if p.kind == "waveguide"]
    if not wg:
        raise ParameterError("detuning sweep needs a waveguide pulse")
    base_pulses = tuple(
        DrivePulse(p.kind, p.envelope, p.targets, 0.0) if p.kind == "waveguide" else p for p in schedule.pulses
    )
    base = schedule.with_pulses(base_pulses)
    kind, space, y0, basis = _choose_engine(initial, base, geometry, method)
    if kind == "sector":
        out = []
        for d in detunings:
            pulses = tuple(
                DrivePulse(p.kind, p.envelope, p.targets, float(d)) if p.kind == "waveguide" else p
                for p in schedule.pulses
            )
            out.append(
                evolve(initial, schedule.with_pulses(pulses), geometry, observables, method="sector", rtol=rtol, atol=atol)
            )
        return out

    # every waveguide pulse contributes one detuning term; they share the swept value
    scale = float(len(wg))
    engine = _SymmetricEngine(space, geometry, base)
    evals, real = _observable_evaluators(kind, space, basis, observables)
    nb = detunings.size
    n = space.dimension
    nt = base.times.size
    data = {k: np.zeros((nt, nb), dtype=complex) for k in observables}
    tr = space.trace_functional
    drift = [0.0]

    def sample(i, y):
        V = y.reshape(n, nb)
        for k, f in evals.items():
            data[k][i] = f(V)
        drift[0] = max(drift[0], np.abs(tr @ V - 1).max())

    Y0 = np.repeat(y0[:, None], nb, axis=1).ravel()
    _, nfev = _integrate(
        lambda a, b: engine.segment(a, b, sweep=scale * detunings), Y0, base, sample, rtol, atol
    )
    if drift[0] > TRACE_TOL:
        raise NumericalError(f"trace drift {drift[0]:.3e} in detuning sweep")
    series = []
    for j in range(nb):
        ch = {k: (v[:, j].real.copy() if real[k] else v[:, j].copy()) for k, v in data.items()}
        series.append(
            TimeSeries(base.times.copy(), ch, {"engine": "symmetric", "nfev": int(nfev), "detuning": float(detunings[j])})
        )
    return series
