import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

import wgqed.dynamics as dyn
from wgqed.cli import (
    ResultTable,
    ScenarioError,
    main,
    parse_scenario,
    read_csv_table,
    run,
    serialize_scenario,
    table_text,
    write_table,
)

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
GOLDEN = SCENARIOS / "golden"


def _write(tmp_path, text, name="s.yaml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_minimal_spectrum_scenario():
    s = parse_scenario("version: 1\ncommand: spectrum\nN: 8\nd: 1.0\nM: 1\n")
    assert s.command == "spectrum" and s.params["M"] == 1
    assert s.geometry["N"] == 8 and s.geometry["gamma_1d"] == 1.0 and s.geometry["gamma_nr"] == 0.0
    assert s.seed == 0 and s.output["format"] == "csv"


def test_scenario_from_path(tmp_path):
    p = _write(tmp_path, "version: 1\ncommand: predict\nN: 6\n")
    assert parse_scenario(p).geometry["N"] == 6
    assert parse_scenario(str(p)).command == "predict"


def test_two_m_above_n_is_rejected():
    with pytest.raises(ScenarioError, match="no dark state for 2M > N") as info:
        parse_scenario("version: 1\ncommand: prepare\nN: 5\nM: 3\n")
    assert info.value.field == "params.M"


@pytest.mark.parametrize(
    "text, fld",
    [
        ("version: 1\ncommand: spectrum\nN: 4\nbogus: 1\n", "bogus"),
        ("version: 1\ncommand: spectrum\ngeometry: {N: 4, colour: red}\n", "geometry.colour"),
        ("version: 1\ncommand: spectrum\nN: 4\nparams: {M: 1, extra: 2}\n", "params.extra"),
        ("version: 1\ncommand: spectrum\nN: 4\noutput: {name: a, dir: b}\n", "output.dir"),
        ("command: spectrum\nN: 4\n", "version"),
        ("version: 1\ncommand: plot\nN: 4\n", "command"),
        ("version: 1\ncommand: spectrum\nN: -2\n", "geometry.N"),
        ("version: 1\ncommand: spectrum\nN: 4\nseed: -1\n", "seed"),
    ],
)
def test_validation_names_field(text, fld):
    with pytest.raises(ScenarioError) as info:
        parse_scenario(text)
    assert info.value.field == fld


def test_parse_error_position():
    with pytest.raises(ScenarioError) as info:
        parse_scenario("version: 1\ncommand: spectrum\nN: [1, 2\n")
    assert info.value.line is not None and info.value.column is not None
    assert "line" in str(info.value)


def test_number_ranges():
    s = parse_scenario("version: 1\ncommand: scan\nparams: {N_values: {start: 2, stop: 4, step: 1}, d_values: {start: 0.1, stop: 0.3, num: 3}}\n")
    assert s.params["N_values"] == [2, 3, 4]
    assert np.allclose(s.params["d_values"], [0.1, 0.2, 0.3])


@given(
    st.sampled_from(["spectrum", "predict", "prepare", "release", "transmit"]),
    st.integers(4, 12),
    st.floats(0.05, 2.0, allow_nan=False),
    st.integers(0, 2**64 - 1),
)
def test_serialize_round_trip(command, N, d, seed):
    s = parse_scenario(f"version: 1\ncommand: {command}\nN: {N}\nd: {d!r}\nM: 2\nseed: {seed}\n")
    again = parse_scenario(serialize_scenario(s))
    assert again == s and again.digest() == s.digest()


def test_figure4_scenario_matches_caption():
    s = parse_scenario(SCENARIOS / "fig4_release.yaml")
    assert s.geometry["N"] == 16 and s.geometry["d"] == 1.0
    drive = s.params["drive"]
    assert (drive["shape"], drive["amplitude"], drive["center"], drive["fwhm"]) == ("gaussian", 0.25, 3.0, 8.0)
    assert s.params["release_detuning"] == 50.0 and s.params["M"] == 2
    assert s.params["switch_time"] == 12.0


def test_spectrum_table():
    (tab,) = run(parse_scenario(SCENARIOS / "spectrum.yaml"))
    rates = np.array(tab.column("rate"))
    assert len(tab.rows) == 8
    assert np.sum(np.abs(rates) < 1e-10) == 7 and np.sum(np.abs(rates - 8) < 1e-10) == 1
    assert {"tool", "version", "scenario_hash", "seed"} <= set(tab.metadata)


def test_predict_table():
    (tab,) = run(parse_scenario(SCENARIOS / "predict.yaml"))
    vals = dict(zip(tab.column("name"), tab.column("value")))
    assert vals["population_fraction"] == pytest.approx(5 / 6)
    assert vals["degeneracy"] == 20
    assert "drive_overlap_dark" in vals and "drive_overlap_bright" in vals


def test_scan_table_rows():
    s = parse_scenario("version: 1\ncommand: scan\nparams: {N_values: [2, 3, 4], d_values: [0.25, 0.5, 1.0]}\n")
    (tab,) = run(s, threads=1)
    assert tab.columns == ["N", "d", "gamma_min"] and len(tab.rows) == 9


def test_csv_and_json_formats(tmp_path):
    tab = ResultTable(["a", "b"], [(1, 0.1), (2, math.nan)], {"seed": 3, "note": "x"})
    text = table_text(tab, "csv")
    assert text.splitlines()[:3] == ["# seed: 3", "# note: x", "a,b"]
    assert "0.10000000000000001" in text and "2,nan" in text
    doc = json.loads(table_text(tab, "json"))
    assert doc["columns"] == ["a", "b"] and doc["data"]["b"] == [0.1, None]
    path = tmp_path / "t.csv"
    write_table(tab, "csv", path)
    back = read_csv_table(path)
    assert back.columns == ["a", "b"] and back.rows[0] == (1.0, 0.1)
    with pytest.raises(ValueError):
        table_text(tab, "xml")
    with pytest.raises(ValueError):
        ResultTable(["a"], [(1, 2)])


def test_empty_table():
    text = table_text(ResultTable(["x", "y"], [], {"seed": 0}), "csv")
    assert text == "# seed: 0\nx,y\n"


def test_float_round_trip(tmp_path):
    vals = [1 / 3, math.pi * 1e-17, 2.0**0.5 * 1e12]
    write_table(ResultTable(["v"], [(v,) for v in vals]), "csv", tmp_path / "f.csv")
    assert [r[0] for r in read_csv_table(tmp_path / "f.csv").rows] == vals


def test_run_writes_identical_files(tmp_path, capsys):
    args = ["run", str(SCENARIOS / "figS_a_prepare.yaml"), "--threads", "1"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "figS_a_prepare.csv").read_bytes()
    assert a == (tmp_path / "b" / "figS_a_prepare.csv").read_bytes()
    manifest = json.loads((tmp_path / "a" / "figS_a_prepare.manifest.json").read_text())
    assert {"scenario", "scenario_hash", "seed", "versions", "wall_time_s", "outputs"} <= set(manifest)
    assert json.loads(capsys.readouterr().out.splitlines()[-1])["status"] == "ok"


def test_run_json_and_seed_override(tmp_path):
    p = _write(tmp_path, "version: 1\ncommand: spectrum\nN: 3\n")
    assert main(["run", str(p), "--out", str(tmp_path), "--format", "json", "--seed", "5"]) == 0
    doc = json.loads((tmp_path / "spectrum.json").read_text())
    assert doc["metadata"]["seed"] == 5 and len(doc["data"]["rate"]) == 3


def test_validate_and_predict_commands(capsys):
    assert main(["validate", str(SCENARIOS / "fig4_release.yaml")]) == 0
    assert json.loads(capsys.readouterr().out)["command"] == "release"
    assert main(["predict", "-N", "8", "-M", "2"]) == 0
    out = capsys.readouterr().out
    assert "population_fraction,0.83333333333333337" in out


def test_exit_code_validation(tmp_path, capsys):
    p = _write(tmp_path, "version: 1\ncommand: prepare\nN: 5\nM: 3\n")
    assert main(["validate", str(p)]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "validation" and err["field"] == "params.M"
    assert main(["predict", "-N", "4", "-M", "3"]) == 2


def test_exit_code_numeric(tmp_path, monkeypatch, capsys):
    monkeypatch.setattr(dyn, "TRACE_TOL", -1.0)
    p = _write(tmp_path, "version: 1\ncommand: prepare\nN: 3\nM: 1\nparams: {duration: 1.0, samples: 5}\n")
    assert main(["run", str(p), "--out", str(tmp_path)]) == 3
    assert json.loads(capsys.readouterr().err)["error"] == "numeric"


def test_exit_code_io(tmp_path, capsys):
    p = _write(tmp_path, "version: 1\ncommand: spectrum\nN: 3\n")
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", str(p), "--out", str(blocker)]) == 4
    assert json.loads(capsys.readouterr().err)["error"] == "io"
    assert main(["validate", str(tmp_path / "missing.yaml")]) == 4


def test_transmit_of_half_filled_dark_state():
    s = parse_scenario(
        "version: 1\ncommand: transmit\nN: 8\nparams: {M: 4, duration: 20.0, detunings: {start: -8, stop: 8, num: 5}}\n"
    )
    (tab,) = run(s)
    assert max(abs(t - 1) for t in tab.column("transmission")) <= 0.01


GOLDEN_CASES = sorted(p.stem for p in SCENARIOS.glob("*.yaml"))


@pytest.mark.parametrize("name", GOLDEN_CASES)
def test_golden_regeneration(name, tmp_path):
    s = parse_scenario(SCENARIOS / f"{name}.yaml")
    for tab in run(s, threads=1):
        write_table(tab, "csv", tmp_path / f"{tab.name}.csv")
        new = read_csv_table(tmp_path / f"{tab.name}.csv")
        ref = read_csv_table(GOLDEN / f"{tab.name}.csv")
        assert new.columns == ref.columns and len(new.rows) == len(ref.rows)
        for r_new, r_ref in zip(new.rows, ref.rows):
            for a, b in zip(r_new, r_ref):
                if isinstance(a, float):
                    assert a == pytest.approx(b, rel=1e-6, abs=1e-9, nan_ok=True)
                else:
                    assert a == b
        assert new.metadata["scenario_hash"] == ref.metadata["scenario_hash"]
