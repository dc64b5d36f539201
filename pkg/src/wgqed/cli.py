"""Scenario-driven command line front end.

    wgqed run <scenario.yaml> [--threads K] [--out DIR] [--format csv|json] [--seed S]
    wgqed validate <scenario.yaml>
    wgqed predict -N 8 -M 2

Scenario files are YAML documents with a required ``version`` key, a
``command`` and optional ``geometry``, ``params`` and ``output`` blocks.  The
keys ``N``, ``d`` and ``M`` may also be given at the top level.  Rates are in
units of the first site's waveguide coupling, distances in wavelengths.

Exit codes: 0 success, 2 invalid scenario, 3 numerical failure, 4 I/O error.
Errors are reported on stderr as one JSON object.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import scipy
import yaml

from . import __version__
from .errors import NumericalError, WgqedError, EigenSolverError, StiffnessError

__all__ = [
    "Scenario",
    "ScenarioError",
    "ResultTable",
    "parse_scenario",
    "serialize_scenario",
    "run",
    "write_table",
    "main",
]

SCHEMA_VERSION = 1
COMMANDS = ("spectrum", "scan", "correlations", "transmit", "prepare", "release", "disorder", "predict")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ScenarioError(WgqedError, ValueError):
    """Invalid scenario document; ``field`` names the offending key."""

    def __init__(self, message: str, field: str | None = None, line: int | None = None, column: int | None = None):
        super().__init__(message)
        self.field = field
        self.line = line
        self.column = column


# -- scenario schema ---------------------------------------------------------------

GEOMETRY_KEYS = {
    "N": None,
    "d": 1.0,
    "positions": None,
    "gamma_1d": 1.0,
    "detunings": None,
    "gamma_nr": 0.0,
    "gamma_dep": 0.0,
    "anharmonicity": 0.0,
    "local_dim": 2,
}

_DRIVE = {"shape": "rectangular", "amplitude": 0.3, "t_on": 0.0, "t_off": None, "center": 3.0, "fwhm": 8.0}

PARAM_DEFAULTS: dict[str, dict[str, Any]] = {
    "spectrum": {"M": 1},
    "scan": {"M": 1, "N_values": None, "d_values": None},
    "correlations": {"state": "dark", "M": 2, "set_a": None, "index": 0},
    "transmit": {
        "M": 0,
        "set_a": None,
        "amplitude": 0.01,
        "duration": 50.0,
        "detunings": None,
        "max_excitation": None,
    },
    "prepare": {
        "M": 1,
        "set_a": None,
        "drive": None,
        "targets": None,
        "duration": 20.0,
        "samples": 201,
        "max_excitation": None,
    },
    "release": {
        "M": 2,
        "set_a": None,
        "drive": None,
        "switch_time": 12.0,
        "release_detuning": 50.0,
        "duration": 20.0,
        "samples": 401,
        "max_excitation": None,
    },
    "disorder": {
        "M": 2,
        "set_a": None,
        "epsilons": [0.0, 1e-3, 1e-2, 5e-2],
        "trials": 200,
        "drive": None,
        "duration": 10.0,
        "samples": 101,
        "max_excitation": None,
    },
    "predict": {"M": 1, "gamma_1": None, "gamma_2": None},
}

TOP_KEYS = {"version", "command", "geometry", "params", "output", "seed", "N", "d", "M"}


@dataclass
class Scenario:
    command: str
    geometry: dict
    params: dict
    output: dict = field(default_factory=lambda: {"name": None, "format": "csv"})
    seed: int = 0
    version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "command": self.command,
            "seed": self.seed,
            "geometry": dict(self.geometry),
            "params": dict(self.params),
            "output": dict(self.output),
        }

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    @property
    def name(self) -> str:
        return self.output.get("name") or self.command


def _fail(msg, fld=None):
    raise ScenarioError(msg, fld)


def _number(value, fld, *, integer=False, minimum=None, allow_none=False):
    if value is None and allow_none:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(f"{fld} must be a number", fld)
    if integer:
        if isinstance(value, float):
            if not value.is_integer():
                _fail(f"{fld} must be an integer", fld)
            value = int(value)
    else:
        value = float(value)
        if not math.isfinite(value):
            _fail(f"{fld} must be finite", fld)
    if minimum is not None and value < minimum:
        _fail(f"{fld} must be >= {minimum}", fld)
    return value


def _number_list(value, fld, integer=False):
    if isinstance(value, dict):
        allowed = {"start", "stop", "num", "step"}
        extra = set(value) - allowed
        if extra:
            _fail(f"unknown key {sorted(extra)[0]!r} in {fld}", f"{fld}.{sorted(extra)[0]}")
        start = _number(value.get("start"), f"{fld}.start")
        stop = _number(value.get("stop"), f"{fld}.stop")
        if "num" in value:
            num = _number(value["num"], f"{fld}.num", integer=True, minimum=1)
            vals = np.linspace(start, stop, num).tolist()
        elif "step" in value:
            step = _number(value["step"], f"{fld}.step")
            if step <= 0:
                _fail(f"{fld}.step must be positive", f"{fld}.step")
            vals = np.arange(start, stop + 0.5 * step, step).tolist()
        else:
            _fail(f"{fld} range needs 'num' or 'step'", fld)
        value = vals
    if not isinstance(value, list) or not value:
        _fail(f"{fld} must be a nonempty list", fld)
    return [_number(v, f"{fld}[{i}]", integer=integer) for i, v in enumerate(value)]


def _site_list(value, fld, N):
    if value is None:
        return None
    if not isinstance(value, list) or not value:
        _fail(f"{fld} must be a nonempty list of site indices", fld)
    out = [_number(v, f"{fld}[{i}]", integer=True, minimum=0) for i, v in enumerate(value)]
    if any(v >= N for v in out):
        _fail(f"{fld} holds a site outside [0, {N - 1}]", fld)
    if len(set(out)) != len(out):
        _fail(f"{fld} repeats a site", fld)
    return out


def _check_drive(value, fld):
    if value is None:
        return None
    if not isinstance(value, dict):
        _fail(f"{fld} must be a mapping", fld)
    extra = set(value) - set(_DRIVE)
    if extra:
        k = sorted(extra)[0]
        _fail(f"unknown key {k!r} in {fld}", f"{fld}.{k}")
    out = dict(_DRIVE)
    out.update(value)
    if out["shape"] not in ("rectangular", "gaussian"):
        _fail(f"{fld}.shape must be 'rectangular' or 'gaussian'", f"{fld}.shape")
    for k in ("amplitude", "t_on", "center", "fwhm"):
        out[k] = _number(out[k], f"{fld}.{k}")
    out["t_off"] = _number(out["t_off"], f"{fld}.t_off", allow_none=True)
    if out["fwhm"] <= 0:
        _fail(f"{fld}.fwhm must be positive", f"{fld}.fwhm")
    return out


def _validate(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        _fail("scenario must be a mapping")
    extra = set(doc) - TOP_KEYS
    if extra:
        k = sorted(extra)[0]
        _fail(f"unknown key {k!r}", k)
    if "version" not in doc:
        _fail("missing required key 'version'", "version")
    version = _number(doc["version"], "version", integer=True)
    if version != SCHEMA_VERSION:
        _fail(f"unsupported scenario version {version}", "version")
    command = doc.get("command")
    if command not in COMMANDS:
        _fail(f"command must be one of {', '.join(COMMANDS)}", "command")
    seed = _number(doc.get("seed", 0), "seed", integer=True, minimum=0)
    if seed >= 2**64:
        _fail("seed must fit in 64 bits", "seed")

    geo_in = doc.get("geometry") or {}
    par_in = doc.get("params") or {}
    out_in = doc.get("output") or {}
    for blk, name in ((geo_in, "geometry"), (par_in, "params"), (out_in, "output")):
        if not isinstance(blk, dict):
            _fail(f"{name} must be a mapping", name)
    geo_in = dict(geo_in)
    par_in = dict(par_in)
    for k in ("N", "d"):
        if k in doc:
            if k in geo_in:
                _fail(f"{k} given twice", k)
            geo_in[k] = doc[k]
    if "M" in doc:
        if "M" in par_in:
            _fail("M given twice", "M")
        par_in["M"] = doc["M"]

    # geometry
    extra = set(geo_in) - set(GEOMETRY_KEYS)
    if extra:
        k = sorted(extra)[0]
        _fail(f"unknown key {k!r} in geometry", f"geometry.{k}")
    geo = dict(GEOMETRY_KEYS)
    geo.update(geo_in)
    if geo["positions"] is not None:
        geo["positions"] = _number_list(geo["positions"], "geometry.positions")
        n_pos = len(geo["positions"])
        if geo["N"] is not None and _number(geo["N"], "geometry.N", integer=True) != n_pos:
            _fail("geometry.N disagrees with the number of positions", "geometry.N")
        geo["N"] = n_pos
        geo["d"] = None
    elif command not in ("scan", "predict") or geo["N"] is not None:
        if geo["N"] is None:
            _fail("geometry.N is required", "geometry.N")
    if geo["N"] is not None:
        geo["N"] = _number(geo["N"], "geometry.N", integer=True, minimum=1)
    if geo["d"] is not None:
        geo["d"] = _number(geo["d"], "geometry.d")
    if isinstance(geo["gamma_1d"], list):
        geo["gamma_1d"] = _number_list(geo["gamma_1d"], "geometry.gamma_1d")
    else:
        geo["gamma_1d"] = _number(geo["gamma_1d"], "geometry.gamma_1d")
    if geo["detunings"] is not None:
        geo["detunings"] = _number_list(geo["detunings"], "geometry.detunings")
    for k in ("gamma_nr", "gamma_dep"):
        geo[k] = _number(geo[k], f"geometry.{k}", minimum=0.0)
    geo["anharmonicity"] = _number(geo["anharmonicity"], "geometry.anharmonicity")
    geo["local_dim"] = _number(geo["local_dim"], "geometry.local_dim", integer=True, minimum=2)
    N = geo["N"]
    for k in ("gamma_1d", "detunings"):
        if isinstance(geo[k], list) and N is not None and len(geo[k]) != N:
            _fail(f"geometry.{k} needs {N} entries", f"geometry.{k}")

    # params
    defaults = PARAM_DEFAULTS[command]
    extra = set(par_in) - set(defaults)
    if extra:
        k = sorted(extra)[0]
        _fail(f"unknown key {k!r} in params for {command}", f"params.{k}")
    par = dict(defaults)
    par.update(par_in)
    if command == "transmit" and isinstance(par["M"], list):
        par["M"] = [_number(m, "params.M", integer=True, minimum=0) for m in par["M"]]
        ms = par["M"]
    else:
        par["M"] = _number(par["M"], "params.M", integer=True, minimum=0)
        ms = [par["M"]]
    dark = command in ("correlations", "transmit", "prepare", "release", "disorder", "predict")
    if command == "correlations" and par["state"] != "dark":
        dark = False
    for m in ms:
        if dark and N is not None and 2 * m > N:
            _fail("no dark state for 2M > N", "params.M")
        if dark and command != "transmit" and m < 1:
            _fail("params.M must be >= 1", "params.M")
    if command == "predict":
        if N is None:
            _fail("geometry.N is required", "geometry.N")
        for k in ("gamma_1", "gamma_2"):
            par[k] = _number(par[k], f"params.{k}", allow_none=True)
        if (par["gamma_1"] is None) != (par["gamma_2"] is None):
            _fail("give both gamma_1 and gamma_2 or neither", "params.gamma_1")
    if command == "scan":
        if par["N_values"] is None:
            if N is None:
                _fail("scan needs params.N_values or geometry.N", "params.N_values")
            par["N_values"] = [N]
        par["N_values"] = _number_list(par["N_values"], "params.N_values", integer=True)
        if par["d_values"] is None:
            if geo["d"] is None:
                _fail("scan needs params.d_values or geometry.d", "params.d_values")
            par["d_values"] = [geo["d"]]
        par["d_values"] = _number_list(par["d_values"], "params.d_values")
        if min(par["N_values"]) < max(par["M"], 1):
            _fail("every N in the scan must be >= M", "params.N_values")
    if command == "spectrum" and not 1 <= par["M"] <= N * (geo["local_dim"] - 1):
        _fail("params.M outside the sector range", "params.M")
    if command == "correlations":
        if par["state"] not in ("dark", "symmetric", "eigen"):
            _fail("params.state must be dark, symmetric or eigen", "params.state")
        par["index"] = _number(par["index"], "params.index", integer=True, minimum=0)
        if par["state"] in ("symmetric", "eigen") and par["M"] > N:
            _fail("params.M exceeds N", "params.M")
    if "set_a" in par:
        par["set_a"] = _site_list(par["set_a"], "params.set_a", N)
        if par["set_a"] is not None and len(ms) == 1 and len(par["set_a"]) != ms[0]:
            _fail("params.set_a must list M sites", "params.set_a")
    if "targets" in par:
        par["targets"] = _site_list(par["targets"], "params.targets", N)
    if "drive" in par:
        par["drive"] = _check_drive(par["drive"], "params.drive")
    for k in ("duration", "switch_time", "release_detuning", "amplitude"):
        if k in par:
            par[k] = _number(par[k], f"params.{k}")
    for k in ("samples", "trials"):
        if k in par:
            par[k] = _number(par[k], f"params.{k}", integer=True, minimum=1 if k == "trials" else 2)
    if "max_excitation" in par:
        par["max_excitation"] = _number(par["max_excitation"], "params.max_excitation", integer=True, minimum=1, allow_none=True)
    if "detunings" in par and par["detunings"] is not None:
        par["detunings"] = _number_list(par["detunings"], "params.detunings")
    if "epsilons" in par:
        par["epsilons"] = _number_list(par["epsilons"], "params.epsilons")
        if any(e < 0 for e in par["epsilons"]):
            _fail("params.epsilons must be >= 0", "params.epsilons")
    if "duration" in par and par["duration"] <= 0:
        _fail("params.duration must be positive", "params.duration")
    if command == "release" and not 0 <= par["switch_time"] <= par["duration"]:
        _fail("params.switch_time must lie inside the run", "params.switch_time")

    # output
    extra = set(out_in) - {"name", "format"}
    if extra:
        k = sorted(extra)[0]
        _fail(f"unknown key {k!r} in output", f"output.{k}")
    out = {"name": out_in.get("name"), "format": out_in.get("format", "csv")}
    if out["name"] is not None and (not isinstance(out["name"], str) or "/" in out["name"] or not out["name"]):
        _fail("output.name must be a plain file stem", "output.name")
    if out["format"] not in ("csv", "json"):
        _fail("output.format must be csv or json", "output.format")
    return Scenario(command, geo, par, out, int(seed), int(version))


def parse_scenario(source) -> Scenario:
    """Parse and validate a scenario from a path or YAML text."""
    if isinstance(source, os.PathLike) or (
        isinstance(source, str) and "\n" not in source and os.path.isfile(source)
    ):
        try:
            text = Path(source).read_bytes().decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ScenarioError(f"scenario is not valid UTF-8: {exc}") from exc
    else:
        text = source
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark else None
        col = mark.column + 1 if mark else None
        where = f" at line {line}, column {col}" if mark else ""
        raise ScenarioError(f"parse error{where}: {getattr(exc, 'problem', exc)}", None, line, col) from exc
    return _validate(doc)


def serialize_scenario(scenario: Scenario) -> str:
    return yaml.safe_dump(scenario.to_dict(), sort_keys=False)


# -- tables ---------------------------------------------------------------------


@dataclass
class ResultTable:
    columns: list[str]
    rows: list[tuple]
    metadata: dict = field(default_factory=dict)
    name: str = "result"

    def __post_init__(self):
        self.rows = [tuple(r) for r in self.rows]
        for r in self.rows:
            if len(r) != len(self.columns):
                raise ValueError("ragged table row")

    def column(self, name: str) -> list:
        k = self.columns.index(name)
        return [r[k] for r in self.rows]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return "%.17g" % v
    return str(v)


def _json_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "null" if not math.isfinite(v) else "%.17g" % v
    if v is None:
        return "null"
    return json.dumps(str(v))


def _json_meta(v):
    if isinstance(v, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_json_meta(x)}" for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_json_meta(x) for x in v) + "]"
    return _json_value(v)


def table_text(table: ResultTable, fmt: str = "csv") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        for k, v in table.metadata.items():
            buf.write(f"# {k}: {_fmt(v) if not isinstance(v, (dict, list)) else json.dumps(v, sort_keys=True)}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(table.columns)
        for r in table.rows:
            w.writerow([_fmt(v) for v in r])
        return buf.getvalue()
    if fmt == "json":
        cols = ", ".join(
            f"{json.dumps(c)}: [" + ", ".join(_json_value(r[i]) for r in table.rows) + "]"
            for i, c in enumerate(table.columns)
        )
        return (
            "{\n"
            f'  "metadata": {_json_meta(table.metadata)},\n'
            f'  "columns": {json.dumps(table.columns)},\n'
            f'  "data": {{{cols}}}\n'
            "}\n"
        )
    raise ValueError(f"unknown format {fmt!r}")


def write_table(table: ResultTable, fmt: str, path) -> None:
    """Write ``table`` as CSV or JSON; floats carry 17 significant digits."""
    text = table_text(table, fmt)
    try:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {path}: {exc.strerror}") from exc


def read_csv_table(path) -> ResultTable:
    """Inverse of the CSV writer (values come back as strings or floats)."""
    meta, lines = {}, []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("# "):
                k, _, v = line[2:].rstrip("\n").partition(": ")
                meta[k] = v
            else:
                lines.append(line)
    reader = csv.reader(lines)
    header = next(reader)
    rows = []
    for r in reader:
        vals = []
        for x in r:
            try:
                vals.append(float(x))
            except ValueError:
                vals.append(x)
        rows.append(tuple(vals))
    return ResultTable(header, rows, meta)


# -- dispatch ---------------------------------------------------------------------


def _geometry(s: Scenario, N: int | None = None, d: float | None = None):
    from .hamiltonian import ChainGeometry

    g = s.geometry
    N = N if N is not None else g["N"]
    if g["positions"] is not None and d is None:
        pos = np.asarray(g["positions"], dtype=float)
    else:
        d = d if d is not None else g["d"]
        pos = d * np.arange(N)
    return ChainGeometry(
        pos,
        g["gamma_1d"],
        detunings=g["detunings"],
        gamma_nr=g["gamma_nr"],
        gamma_dep=g["gamma_dep"],
        anharmonicity=g["anharmonicity"],
    )


def _partition(s: Scenario, N: int, M: int):
    from .darkstates import Partition

    a = s.params.get("set_a")
    return Partition.of(N, a) if a is not None else Partition.first(N, M)


def _envelope(drive: dict | None, default: dict):
    from .hamiltonian import Gaussian, Rectangular

    d = dict(default)
    if drive:
        d.update({k: v for k, v in drive.items() if not (k == "t_off" and v is None)})
    if d["shape"] == "gaussian":
        return Gaussian(d["amplitude"], d["center"], d["fwhm"])
    t_off = d.get("t_off")
    return Rectangular(d["amplitude"], d["t_on"], math.inf if t_off is None else t_off)


def _meta(s: Scenario, **extra) -> dict:
    m = {"tool": "wgqed", "version": __version__, "command": s.command, "scenario_hash": s.digest(), "seed": s.seed}
    m.update(extra)
    return m


def _series_table(s: Scenario, ts, keep, **extra) -> ResultTable:
    cols = ["time"] + keep
    rows = [tuple([t] + [float(np.real(ts[c][i])) for c in keep]) for i, t in enumerate(ts.times)]
    return ResultTable(cols, rows, _meta(s, **extra), s.name)


def _run_spectrum(s, threads):
    from .analysis import decay_spectrum

    spec = decay_spectrum(_geometry(s), s.params["M"], s.geometry["local_dim"])
    rows = [(k, float(r), float(sh)) for k, (r, sh) in enumerate(zip(spec.rates, spec.shifts))]
    return [ResultTable(["index", "rate", "shift"], rows, _meta(s, M=s.params["M"]), s.name)]


def _run_scan(s, threads):
    from .analysis import min_decay_scan

    g = s.geometry
    kw = dict(gamma_nr=g["gamma_nr"], gamma_dep=g["gamma_dep"])
    if not isinstance(g["gamma_1d"], list):
        kw["gamma_1d"] = g["gamma_1d"]
    grid = min_decay_scan(s.params["N_values"], s.params["d_values"], s.params["M"], threads=threads, **kw)
    meta = _meta(s, M=s.params["M"])
    if grid.failures:
        meta["failures"] = {f"{n},{d}": msg for (n, d), msg in grid.failures.items()}
    return [ResultTable(["N", "d", "gamma_min"], list(grid.rows()), meta, s.name)]


def _run_correlations(s, threads):
    from .analysis import decay_spectrum, spatial_correlations
    from .darkstates import symmetric_state
    from .hilbert import enumerate_basis

    N, M = s.geometry["N"], s.params["M"]
    geo = _geometry(s)
    if s.params["state"] == "dark":
        from .protocols import target_dark_state

        basis = enumerate_basis(N, 2, M)
        state = target_dark_state(geo, _partition(s, N, M), basis)
    elif s.params["state"] == "symmetric":
        state = symmetric_state(N, M, enumerate_basis(N, 2, M))
    else:
        spec = decay_spectrum(geo, M)
        state = spec.state(min(s.params["index"], len(spec) - 1))
    C = spatial_correlations(state).matrix
    rows = [(n, m, float(C[n, m])) for n in range(N) for m in range(n + 1, N)]
    return [ResultTable(["n", "m", "correlation"], rows, _meta(s, state=s.params["state"], M=M), s.name)]


def _run_transmit(s, threads):
    from .analysis import transmission_spectrum
    from .hamiltonian import DrivePulse, Rectangular
    from .hilbert import enumerate_basis, ground_state
    from .protocols import target_dark_state

    N = s.geometry["N"]
    geo = _geometry(s)
    p = s.params
    ms = p["M"] if isinstance(p["M"], list) else [p["M"]]
    probe = DrivePulse("waveguide", Rectangular(p["amplitude"], 0.0, p["duration"]))
    rows, fwhm, tmin = [], {}, {}
    warn = None
    for M in ms:
        cap = p["max_excitation"] if p["max_excitation"] is not None else M + 1
        basis = enumerate_basis(N, 2, min(cap, N))
        st = ground_state(basis) if M == 0 else target_dark_state(geo, _partition(s, N, M), basis)
        curve = transmission_spectrum(st, geo, probe, p["duration"], detunings=p["detunings"])
        warn = curve.metadata.get("warning", warn)
        fwhm[str(M)] = curve.fwhm()
        tmin[str(M)] = float(curve.transmission.min())
        rows += [(M, float(x), float(t)) for x, t in zip(curve.detunings, curve.transmission)]
    meta = _meta(s, fwhm=fwhm, min_transmission=tmin)
    if warn:
        meta["warning"] = warn
    return [ResultTable(["M", "detuning", "transmission"], rows, meta, s.name)]


def _run_prepare(s, threads):
    from .hamiltonian import DrivePulse
    from .protocols import ProtocolConfig, prepare_dark_state

    N, M, p = s.geometry["N"], s.params["M"], s.params
    part = _partition(s, N, M)
    targets = tuple(p["targets"]) if p["targets"] is not None else part.set_a
    env = _envelope(p["drive"], dict(_DRIVE))
    cfg = ProtocolConfig(
        _geometry(s), part, (DrivePulse("local", env, targets),), p["duration"], p["samples"],
        max_excitation=p["max_excitation"],
    )
    ts = prepare_dark_state(cfg)
    keep = ["fidelity", "fidelity_squared", "intensity", "excitation"] + [f"pop_{j}" for j in range(N)]
    m = ts.metadata
    extra = {k: m[k] for k in ("max_fidelity", "max_fidelity_time", "pulse_area", "single_qubit_angle", "mode_angle")}
    return [_series_table(s, ts, keep, **extra)]


def _run_release(s, threads):
    from .hamiltonian import DrivePulse
    from .protocols import ProtocolConfig, storage_release

    N, M, p = s.geometry["N"], s.params["M"], s.params
    part = _partition(s, N, M)
    default = dict(_DRIVE, shape="gaussian", amplitude=0.25, center=3.0, fwhm=8.0)
    env = _envelope(p["drive"], default)
    cfg = ProtocolConfig(
        _geometry(s), part, (DrivePulse("local", env, part.set_a),), p["duration"], p["samples"],
        switch_time=p["switch_time"], release_detuning=p["release_detuning"], max_excitation=p["max_excitation"],
    )
    ts = storage_release(cfg)
    keep = [
        "intensity", "intensity_approx", "intensity_a", "intensity_b", "intensity_cross",
        "s1s1", "s2s2", "re_s1s2", "excitation", "product_population", "fidelity",
    ]
    m = ts.metadata
    keys = (
        "peak_time", "peak_intensity", "max_fidelity", "storage_time", "max_excitation",
        "pulse_area", "single_qubit_angle", "mode_angle",
    )
    extra = {k: m[k] for k in keys}
    return [_series_table(s, ts, keep, **extra)]


def _run_disorder(s, threads):
    from .hamiltonian import DrivePulse
    from .protocols import DisorderConfig, disorder_ensemble

    N, M, p = s.geometry["N"], s.params["M"], s.params
    if p["set_a"] is None:
        part_sites = [N // 2 - 1, N // 2] if M == 2 else list(range(N // 2 - M // 2, N // 2 - M // 2 + M))
    else:
        part_sites = p["set_a"]
    from .darkstates import Partition

    part = Partition.of(N, part_sites)
    env = _envelope(p["drive"], dict(_DRIVE, amplitude=0.25, t_off=6.7))
    cfg = DisorderConfig(
        tuple(p["epsilons"]), p["trials"], s.seed, _geometry(s), part,
        DrivePulse("local", env, part.set_a), p["duration"], p["samples"],
        max_excitation=p["max_excitation"], workers=threads or 1,
    )
    res = disorder_ensemble(cfg)
    meta = _meta(s, trials=res.trials)
    rows = [
        (float(e), float(res.mean_peak[i]), float(res.stderr_peak[i]), float(res.mean_rate[i]),
         float(res.stderr_rate[i]), int(res.failures[i]))
        for i, e in enumerate(res.epsilons)
    ]
    main = ResultTable(
        ["epsilon", "mean_peak", "stderr_peak", "mean_rate", "stderr_rate", "failures"], rows, meta, s.name
    )
    crow = [
        (float(e), n, m, float(res.mean_correlation[i, n, m]))
        for i, e in enumerate(res.epsilons) for n in range(N) for m in range(n + 1, N)
    ]
    corr = ResultTable(["epsilon", "n", "m", "correlation"], crow, dict(meta), s.name + "_correlations")
    return [main, corr]


def _run_predict(s, threads):
    from .darkstates import analytic_predictions

    p = s.params
    preds = analytic_predictions(s.geometry["N"], p["M"], p["gamma_1"], p["gamma_2"])
    rows = [(q.name, float(q.value), q.note) for q in preds]
    return [ResultTable(["name", "value", "note"], rows, _meta(s, N=s.geometry["N"], M=p["M"]), s.name)]


_RUNNERS = {
    "spectrum": _run_spectrum,
    "scan": _run_scan,
    "correlations": _run_correlations,
    "transmit": _run_transmit,
    "prepare": _run_prepare,
    "release": _run_release,
    "disorder": _run_disorder,
    "predict": _run_predict,
}


def run(scenario: Scenario, threads: int | None = None) -> list[ResultTable]:
    """Execute a scenario and return its result tables."""
    return _RUNNERS[scenario.command](scenario, threads)


# -- entry point ------------------------------------------------------------------


def _error(kind: str, exc: BaseException, code: int, **extra) -> int:
    payload = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    payload.update({k: v for k, v in extra.items() if v is not None})
    print(json.dumps(payload), file=sys.stderr)
    return code


def _classify(exc: BaseException) -> int:
    if isinstance(exc, ScenarioError):
        return _error("validation", exc, EXIT_VALIDATION, field=exc.field, line=exc.line, column=exc.column)
    if isinstance(exc, (NumericalError, EigenSolverError, StiffnessError)):
        return _error("numeric", exc, EXIT_NUMERIC, time=getattr(exc, "time", None))
    if isinstance(exc, OSError):
        return _error("io", exc, EXIT_IO, path=getattr(exc, "filename", None))
    if isinstance(exc, (WgqedError, ValueError)):
        return _error("validation", exc, EXIT_VALIDATION)
    raise exc


def _load(path: str) -> Scenario:
    return parse_scenario(Path(path))


def _cmd_run(args) -> int:
    s = _load(args.scenario)
    if args.seed is not None:
        if not 0 <= args.seed < 2**64:
            raise ScenarioError("seed must fit in 64 bits", "seed")
        s.seed = args.seed
    fmt = args.format or s.output["format"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    tables = run(s, args.threads)
    wall = time.perf_counter() - t0
    files = []
    for tab in tables:
        path = out / f"{tab.name}.{fmt}"
        write_table(tab, fmt, path)
        files.append(str(path))
    manifest = {
        "scenario": s.to_dict(),
        "scenario_hash": s.digest(),
        "seed": s.seed,
        "versions": {
            "wgqed": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
        "threads": args.threads,
        "outputs": files,
        "wall_time_s": wall,
    }
    mpath = out / f"{s.name}.manifest.json"
    try:
        mpath.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write {mpath}: {exc.strerror}") from exc
    print(json.dumps({"status": "ok", "outputs": files, "manifest": str(mpath)}))
    return EXIT_OK


def _cmd_validate(args) -> int:
    s = _load(args.scenario)
    print(json.dumps({"status": "ok", "command": s.command, "scenario_hash": s.digest()}))
    return EXIT_OK


def _cmd_predict(args) -> int:
    doc = {"version": SCHEMA_VERSION, "command": "predict", "N": args.N, "M": args.M}
    if args.gamma_1 is not None or args.gamma_2 is not None:
        doc["params"] = {"gamma_1": args.gamma_1, "gamma_2": args.gamma_2}
    s = _validate(doc)
    (tab,) = run(s)
    sys.stdout.write(table_text(tab, args.format))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wgqed", description="Waveguide QED dark-state simulations.")
    ap.add_argument("--version", action="version", version=f"wgqed {__version__}")
    sub = ap.add_subparsers(dest="cmd", required=True)
    r = sub.add_parser("run", help="run a scenario file")
    r.add_argument("scenario")
    r.add_argument("--threads", type=int, default=None, help="worker count (default: all cores)")
    r.add_argument("--out", default=".", help="output directory")
    r.add_argument("--format", choices=("csv", "json"), default=None)
    r.add_argument("--seed", type=int, default=None)
    v = sub.add_parser("validate", help="check a scenario file")
    v.add_argument("scenario")
    p = sub.add_parser("predict", help="print closed-form predictions")
    p.add_argument("-N", type=int, required=True)
    p.add_argument("-M", type=int, required=True)
    p.add_argument("--gamma-1", type=float, default=None)
    p.add_argument("--gamma-2", type=float, default=None)
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None) is None and args.cmd == "run":
        args.threads = os.cpu_count() or 1
    handlers = {"run": _cmd_run, "validate": _cmd_validate, "predict": _cmd_predict}
    try:
        return handlers[args.cmd](args)
    except BaseException as exc:  # noqa: BLE001 - mapped to exit codes
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        return _classify(exc)


if __name__ == "__main__":
    sys.exit(main())
