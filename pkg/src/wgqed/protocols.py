"""End-to-end runs: dark-state preparation, storage and release, disorder ensembles."""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.integrate import quad

from .darkstates import Partition, dark_state, dark_state_nonuniform
from .dynamics import (
    DetuningStep,
    EvolutionSchedule,
    TimeSeries,
    evolve,
    field_operator,
)
from .errors import NoDarkStateError, ParameterError, WgqedError
from .hamiltonian import ChainGeometry, DrivePulse, Gaussian, Rectangular, snapped_cos_sin
from .hilbert import (
    SectorBasis,
    StateVector,
    basis_state,
    collective_lowering,
    enumerate_basis,
    ground_state,
    number_operator,
    total_number,
)

__all__ = [
    "ProtocolConfig",
    "DisorderConfig",
    "EnsembleResult",
    "target_dark_state",
    "prepare_dark_state",
    "storage_release",
    "disorder_ensemble",
    "fit_decay_rate",
    "beat_average",
    "pulse_calibration",
]


@dataclass(frozen=True, eq=False)
class ProtocolConfig:
    """Chain, target dark state, drives, optional release step and output grid.

    ``max_excitation`` defaults to ``M + 1`` for preparation runs and ``M + 2``
    for storage and release.
    """

    geometry: ChainGeometry
    partition: Partition
    pulses: tuple[DrivePulse, ...]
    duration: float
    samples: int = 401
    switch_time: float | None = None
    release_detuning: float = 0.0
    max_excitation: int | None = None
    method: str = "auto"

    def __post_init__(self):
        object.__setattr__(self, "pulses", tuple(self.pulses))
        if self.partition.n_sites != self.geometry.n_sites:
            raise ParameterError("partition and geometry have different site counts")
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise ParameterError("duration must be positive and finite")
        if self.samples < 2:
            raise ParameterError("need at least two output samples")
        if not math.isfinite(self.release_detuning):
            raise ParameterError("release detuning must be finite")
        if self.switch_time is not None:
            if not 0 <= self.switch_time <= self.duration:
                raise ParameterError("switch time must lie inside the run")
            if self.switch_time < self.preparation_end():
                raise ParameterError(
                    f"switch at {self.switch_time:g} precedes the end of preparation "
                    f"({self.preparation_end():g})"
                )

    @property
    def m(self) -> int:
        return self.partition.m

    def preparation_end(self) -> float:
        """Latest drive end; a Gaussian counts as ending one FWHM after its peak."""
        end = 0.0
        for p in self.pulses:
            env = p.envelope
            if isinstance(env, Gaussian):
                end = max(end, env.center + env.fwhm)
            elif math.isfinite(env.t_off):
                end = max(end, env.t_off)
            else:
                end = math.inf
        return end

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.duration, self.samples)

    @classmethod
    def figure4(cls, n_sites: int = 16, m: int = 2, **overrides) -> "ProtocolConfig":
        """Storage-and-release sequence: Gaussian drive on the first ``m`` sites,
        then a detuning step on the rest."""
        kw = dict(
            geometry=ChainGeometry.regular(n_sites, 1.0),
            partition=Partition.first(n_sites, m),
            pulses=(DrivePulse("local", Gaussian(0.25, 3.0, 8.0), tuple(range(m))),),
            duration=20.0,
            samples=401,
            switch_time=12.0,
            release_detuning=50.0,
        )
        kw.update(overrides)
        return cls(**kw)


def _mirror_signs(geometry: ChainGeometry) -> str:
    c, s = snapped_cos_sin(geometry.positions)
    if np.any(s != 0) or np.any(np.abs(c) != 1):
        raise ParameterError("dark states need spacings that are multiples of half a wavelength")
    rel = c * c[0]
    if np.all(rel == 1):
        return "uniform"
    if np.all(rel == (-1.0) ** np.arange(c.size)):
        return "alternating"
    raise ParameterError("site phases are neither uniform nor alternating")


def target_dark_state(geometry: ChainGeometry, partition: Partition, basis: SectorBasis) -> StateVector:
    """Dark state matching the chain's couplings and the stored set."""
    N, M = geometry.n_sites, partition.m
    if 2 * M > N:
        raise NoDarkStateError(f"no dark state for 2M > N (N={N}, M={M})")
    g = geometry.gamma_1d
    if np.all(g == g[0]):
        return dark_state(N, M, basis, partition, signs=_mirror_signs(geometry))
    ga = g[list(partition.set_a)]
    gb = g[list(partition.set_b)]
    if np.all(ga == ga[0]) and np.all(gb == gb[0]):
        if _mirror_signs(geometry) != "uniform":
            raise ParameterError("two-rate dark states are built for full-wavelength spacing")
        return dark_state_nonuniform(N, M, float(ga[0]), float(gb[0]), basis, partition)
    raise ParameterError("couplings must be uniform or take one value per partition set")


def _check_targets(config: ProtocolConfig):
    N = config.geometry.n_sites
    for p in config.pulses:
        if p.kind != "local":
            continue
        sites = set(p.sites(N))
        if not sites <= set(config.partition.set_a):
            raise ParameterError("drive targets must lie inside the stored set")
        if len(sites) > N - 1:
            raise ParameterError("at most N - 1 sites may be driven")


def pulse_calibration(config: ProtocolConfig) -> dict:
    """Area of the local drive over the run and the two rotation-angle readings.

    ``single_qubit_angle`` is ``2 A`` for one driven qubit; ``mode_angle`` is
    ``2 sqrt(K) A`` for the symmetric mode of the ``K`` driven qubits.
    """
    N = config.geometry.n_sites
    area, k = 0.0, 0
    for p in config.pulses:
        if p.kind != "local":
            continue
        pts = [e for e in p.envelope.edges() if 0 < e < config.duration]
        a, _ = quad(p.envelope, 0.0, config.duration, points=pts or None, limit=200)
        area += a
        k = max(k, len(p.sites(N)))
    return {
        "pulse_area": area,
        "single_qubit_angle": 2 * area,
        "mode_angle": 2 * math.sqrt(k) * area,
    }


def _basis(config: ProtocolConfig, extra: int) -> SectorBasis:
    N = config.geometry.n_sites
    cap = config.max_excitation if config.max_excitation is not None else config.m + extra
    return enumerate_basis(N, 2, min(cap, N))


def prepare_dark_state(config: ProtocolConfig) -> TimeSeries:
    """Drive the chain from the ground state towards the target dark state.

    Channels: ``fidelity`` ``<D|rho|D>``, ``fidelity_squared`` (its square),
    ``pop_j`` per site, ``intensity`` (emitted, no input field) and
    ``excitation``.  Metadata holds the maximal fidelity and its time.
    """
    _check_targets(config)
    basis = _basis(config, 1)
    target = target_dark_state(config.geometry, config.partition, basis)
    A = field_operator(config.geometry, basis)
    obs = {"fidelity": target, "intensity": (A.getH() @ A).tocsr(), "excitation": total_number(basis)}
    for j in range(basis.n_sites):
        obs[f"pop_{j}"] = number_operator(basis, j)
    sched = EvolutionSchedule(config.duration, config.times, pulses=config.pulses)
    ts = evolve(ground_state(basis), sched, config.geometry, obs, method=config.method)
    ts.channels["fidelity_squared"] = ts["fidelity"] ** 2
    k = int(np.argmax(ts["fidelity"]))
    ts.metadata.update(max_fidelity=float(ts["fidelity"][k]), max_fidelity_time=float(ts.times[k]))
    ts.metadata.update(pulse_calibration(config))
    return ts


def storage_release(config: ProtocolConfig) -> TimeSeries:
    """Prepare, hold, then detune the complement set to release the excitations.

    Channels: ``intensity`` and its parts ``intensity_a``, ``intensity_b``,
    ``intensity_cross`` (``2 Re`` of the cross term) and ``intensity_approx``
    (without the cross term); the normalized collective terms ``s1s1``, ``s2s2``,
    ``re_s1s2``; ``excitation``, ``product_population`` (all of the stored set
    excited) and ``fidelity``.
    """
    if config.switch_time is None:
        raise ParameterError("storage_release needs a switch time")
    _check_targets(config)
    geo = config.geometry
    part = config.partition
    basis = _basis(config, 2)
    target = target_dark_state(geo, part, basis)
    M, N = part.m, geo.n_sites
    w = np.sqrt(geo.gamma_1d / 2)
    a1 = collective_lowering(basis, part.set_a, w[list(part.set_a)])
    a2 = collective_lowering(basis, part.set_b, w[list(part.set_b)])
    s1 = collective_lowering(basis, part.set_a, 1 / math.sqrt(M))
    s2 = collective_lowering(basis, part.set_b, 1 / math.sqrt(N - M))
    occ = np.zeros(N, dtype=int)
    occ[list(part.set_a)] = 1
    obs = {
        "intensity_a": (a1.getH() @ a1).tocsr(),
        "intensity_b": (a2.getH() @ a2).tocsr(),
        "cross": (a1.getH() @ a2).tocsr(),
        "s1s1": (s1.getH() @ s1).tocsr(),
        "s2s2": (s2.getH() @ s2).tocsr(),
        "s1s2": (s1.getH() @ s2).tocsr(),
        "excitation": total_number(basis),
        "product_population": basis_state(basis, occ),
        "fidelity": target,
    }
    step = DetuningStep(part.set_b, config.release_detuning, config.switch_time)
    sched = EvolutionSchedule(config.duration, config.times, config.pulses, (step,))
    ts = evolve(ground_state(basis), sched, geo, obs, method=config.method)
    ch = ts.channels
    ch["intensity_cross"] = 2 * ch.pop("cross").real
    ch["re_s1s2"] = ch.pop("s1s2").real
    ch["intensity_approx"] = ch["intensity_a"] + ch["intensity_b"]
    ch["intensity"] = ch["intensity_approx"] + ch["intensity_cross"]
    t = ts.times
    after = t >= config.switch_time
    k = int(np.flatnonzero(after)[np.argmax(ch["intensity"][after])])
    before = ~after
    fid = ch["fidelity"]
    fmax = float(fid[before].max()) if before.any() else float("nan")
    hold = np.flatnonzero(before & (fid >= 0.99 * fmax))
    start = float(t[hold[0]]) if hold.size else float("nan")
    ts.metadata.update(
        peak_time=float(t[k]),
        peak_intensity=float(ch["intensity"][k]),
        max_fidelity=fmax,
        storage_start=start,
        storage_time=float(config.switch_time - start),
        switch_time=float(config.switch_time),
        max_excitation=basis.max_excitation,
        **pulse_calibration(config),
    )
    return ts


def beat_average(times: np.ndarray, values: np.ndarray, period: float) -> tuple[np.ndarray, np.ndarray]:
    """Moving average over one ``period`` on a uniform grid.

    Returns the window-centre times and the averaged values (windows that
    would run past either end are dropped).
    """
    t = np.asarray(times, dtype=float)
    v = np.asarray(values)
    dt = t[1] - t[0]
    if not np.allclose(np.diff(t), dt, rtol=1e-9, atol=1e-12):
        raise ParameterError("beat_average needs a uniform time grid")
    w = max(1, int(round(period / dt)))
    if w > t.size:
        raise ParameterError("averaging window exceeds the series")
    c = np.concatenate([[0.0], np.cumsum(v)])
    avg = (c[w:] - c[:-w]) / w
    centres = 0.5 * (t[: t.size - w + 1] + t[w - 1 :])
    return centres, avg


# -- disorder -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DisorderConfig:
    """Monte-Carlo over Gaussian position disorder of standard deviation ``epsilon``
    (in wavelengths).

    Every trial prepares the two-excitation dark state on ``partition.set_a``
    with ``pulse`` and records the peak fidelity, the decay rate of the
    fidelity tail and the two-excitation correlations at the peak.
    """

    epsilons: tuple[float, ...]
    trials: int
    seed: int
    geometry: ChainGeometry
    partition: Partition
    pulse: DrivePulse
    duration: float
    samples: int = 301
    max_excitation: int | None = None
    fit_window: tuple[float, float] = (0.9, 0.3)
    workers: int = 1

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if not eps:
            raise ParameterError("need at least one epsilon")
        if any(not (e >= 0 and math.isfinite(e)) for e in eps):
            raise ParameterError("epsilon values must be finite and >= 0")
        object.__setattr__(self, "epsilons", eps)
        if int(self.trials) < 1:
            raise ParameterError("trials must be >= 1")
        if not 0 <= int(self.seed) < 2**64:
            raise ParameterError("seed must be a 64-bit unsigned integer")
        if self.partition.n_sites != self.geometry.n_sites:
            raise ParameterError("partition and geometry have different site counts")
        hi, lo = self.fit_window
        if not 0 < lo < hi <= 1:
            raise ParameterError("fit window must satisfy 0 < low < high <= 1")

    @classmethod
    def central(cls, n_sites: int = 10, **kw) -> "DisorderConfig":
        """Rectangular drive on the two central sites of a ``n_sites`` chain."""
        mid = (n_sites // 2 - 1, n_sites // 2)
        defaults = dict(
            geometry=ChainGeometry.regular(n_sites, 1.0),
            partition=Partition.of(n_sites, mid),
            pulse=DrivePulse("local", Rectangular(0.25, 0.0, 6.7), mid),
            duration=10.0,
            samples=101,
        )
        defaults.update(kw)
        return cls(**defaults)


@dataclass(eq=False)
class EnsembleResult:
    """Per-epsilon statistics; ``peaks``/``rates`` keep every trial's value."""

    epsilons: np.ndarray
    trials: int
    mean_peak: np.ndarray
    stderr_peak: np.ndarray
    mean_rate: np.ndarray
    stderr_rate: np.ndarray
    mean_correlation: np.ndarray  # (n_eps, N, N)
    peaks: np.ndarray  # (n_eps, trials)
    rates: np.ndarray
    failures: np.ndarray  # per epsilon
    messages: dict = field(default_factory=dict)


def fit_decay_rate(times: np.ndarray, fidelity: np.ndarray, window=(0.9, 0.3), start: float = 0.0) -> float:
    """Exponential decay rate of the fidelity after its peak.

    Least squares of ``log F`` over the points after the peak where ``F`` lies
    between ``window[1]`` and ``window[0]`` times the peak.  With fewer than
    three such points everything after the earlier of the peak and ``start``
    is fitted instead.
    """
    t = np.asarray(times, dtype=float)
    f = np.asarray(fidelity, dtype=float)
    k = int(np.argmax(f))
    peak = f[k]
    if peak <= 0:
        return float("nan")
    hi, lo = window
    tail = np.arange(k, t.size)
    sel = tail[(f[tail] <= hi * peak) & (f[tail] >= lo * peak)]
    if sel.size < 3:
        sel = np.flatnonzero((t >= min(start, t[k])) & (f > 0))
    if sel.size < 2:
        return float("nan")
    slope = np.polyfit(t[sel], np.log(f[sel]), 1)[0]
    return float(-slope)


def _trial_positions(config: DisorderConfig, eps: float, trial: int) -> np.ndarray:
    base = config.geometry.positions
    if eps == 0:
        return base.copy()
    rng = np.random.default_rng(np.random.SeedSequence(int(config.seed), spawn_key=(int(trial),)))
    return base + eps * rng.standard_normal(base.size)


def _run_trial(config: DisorderConfig, positions: np.ndarray):
    geo = config.geometry.replace(positions=positions)
    N = geo.n_sites
    cap = config.max_excitation if config.max_excitation is not None else config.partition.m + 1
    basis = enumerate_basis(N, 2, min(cap, N))
    target = dark_state(N, config.partition.m, basis, config.partition)
    sl = basis.sector(2)
    pairs = basis.states[sl]
    obs = {"fidelity": target}
    for k, row in zip(range(sl.start, sl.stop), pairs):
        proj = sp.csr_matrix(([1.0], ([k], [k])), shape=(basis.dimension, basis.dimension))
        obs[f"c{k}"] = proj
    times = np.linspace(0.0, config.duration, config.samples)
    sched = EvolutionSchedule(config.duration, times, pulses=(config.pulse,))
    ts = evolve(ground_state(basis), sched, geo, obs, method="sector")
    f = ts["fidelity"]
    k = int(np.argmax(f))
    C = np.zeros((N, N))
    for idx, row in zip(range(sl.start, sl.stop), pairs):
        i, j = np.flatnonzero(row)
        C[i, j] = C[j, i] = ts[f"c{idx}"][k]
    end = config.pulse.envelope.t_off if isinstance(config.pulse.envelope, Rectangular) else 0.0
    rate = fit_decay_rate(times, f, config.fit_window, start=min(end, config.duration))
    return float(f[k]), rate, C


def _trial_task(args):
    config, eps, trial = args
    try:
        return _run_trial(config, _trial_positions(config, eps, trial)), None
    except WgqedError as exc:
        return None, f"{type(exc).__name__}: {exc}"


def disorder_ensemble(config: DisorderConfig) -> EnsembleResult:
    """Run every (epsilon, trial) and aggregate mean and standard error.

    Trial ``k`` draws its displacements from a stream seeded by ``(seed, k)``, so
    results do not depend on the trial count, the epsilon grid or the number
    of workers.  The ordered case (epsilon 0) is run once.
    """
    N = config.geometry.n_sites
    eps = np.asarray(config.epsilons)
    T = int(config.trials)
    tasks = []
    for e in eps:
        tasks.extend([(config, float(e), t) for t in range(T if e > 0 else 1)])
    workers = config.workers or os.cpu_count() or 1
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_trial_task, tasks, chunksize=1))
    else:
        results = [_trial_task(t) for t in tasks]

    peaks = np.full((eps.size, T), np.nan)
    rates = np.full((eps.size, T), np.nan)
    corr = np.zeros((eps.size, N, N))
    failures = np.zeros(eps.size, dtype=int)
    messages: dict = {}
    pos = 0
    for i, e in enumerate(eps):
        n = T if e > 0 else 1
        chunk = results[pos : pos + n]
        pos += n
        if e == 0:
            chunk = chunk * T
        good = 0
        for t, (res, err) in enumerate(chunk):
            if res is None:
                failures[i] += 1
                messages.setdefault(float(e), []).append(err)
                continue
            peaks[i, t], rates[i, t], C = res
            corr[i] += C
            good += 1
        if good:
            corr[i] /= good

    def stats(x):
        n = np.sum(~np.isnan(x), axis=1)
        mean = np.array([np.nanmean(r) if c else np.nan for r, c in zip(x, n)])
        # identical samples give an exact zero instead of a rounding residue
        sd = np.array(
            [np.nanstd(r, ddof=1) if c > 1 and np.nanmax(r) > np.nanmin(r) else 0.0 for r, c in zip(x, n)]
        )
        return mean, np.where(n > 0, sd / np.sqrt(np.maximum(n, 1)), np.nan)

    mp, sp_ = stats(peaks)
    mr, sr = stats(rates)
    return EnsembleResult(eps, T, mp, sp_, mr, sr, corr, peaks, rates, failures, messages)
