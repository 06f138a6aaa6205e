import json

import numpy as np
import pytest

from heatnet.cli import ENV_OUTPUT_ROOT, main, run
from heatnet.network import controllability_closure
from heatnet.scenario import PRESETS, ScenarioError, load_preset, parse_scenario, parse_text, preset_text

SMALL = """\
name: small
network:
  vertices: [x]
  pins:
    x: {polynomial: [0, 0, 0.5, 0, 0.25]}
thermostats:
  - name: b
    vertex: x
    coupling: {kind: gauss, a: 1.0, sigma: 1.0}
    init: {kind: gauss_packet, b: 0.5, c: 0.4, s: 1.0}
grid: {nu_max: 8.0, count: 128}
integrator: {dt: 2.0e-3, horizon: 10.0, sample_every: 10}
initial:
  q: [1.2]
  p: [0.3]
analysis: {kernel_tau_max: 12.0}
"""

# hand-traced closures of the bundled presets
CLOSURES = {
    "single": {"x"},
    "chain1_2baths": {"x"},
    "chain3": {1, 2, 3},
    "chain3_lambda2": {2},
    "chain5": {1, 2, 3, 4, 5},
    "star4": {"c", "l1", "l2", "l3"},
    "tree7": {"r", "a", "b", "a1", "a2", "b1", "b2"},
}


@pytest.mark.parametrize("name", PRESETS)
def test_presets_validate(name):
    sc = load_preset(name)
    assert controllability_closure(sc.net) == frozenset(CLOSURES[name])
    if sc.negative_fixture:
        assert sc.warnings and "A5" in sc.warnings[0]
    else:
        assert not sc.warnings
    assert sc.config_hash() == load_preset(name).config_hash()


def test_chain3_preset_shape():
    sc = load_preset("chain3")
    assert sc.net.coupled == {1, 3} and sc.integrator.horizon == 200.0 and sc.grid.count == 1024


def test_syntax_error_reports_line():
    with pytest.raises(ScenarioError, match=r"<string>:3: syntax error"):
        parse_text("name: x\nnetwork: [1,\n")


def test_unknown_key_reports_line():
    text = SMALL.replace("sample_every: 10}", "sample_every: 10, substeps: 3}")
    with pytest.raises(ScenarioError, match=r":12: unknown key 'substeps' in integrator"):
        parse_text(text)
    with pytest.raises(ScenarioError, match="unknown key 'colour'"):
        parse_text(SMALL + "colour: blue\n")


def test_duplicate_key():
    with pytest.raises(ScenarioError, match="duplicate key"):
        parse_text(SMALL + "name: again\n")


def test_guard_is_hard_error():
    with pytest.raises(ScenarioError, match="recurrence guard"):
        parse_text(SMALL.replace("horizon: 10.0", "horizon: 30.0"))


@pytest.mark.parametrize("old, new, msg", [
    ("count: 128", "count: 127", "even"),
    ("q: [1.2]", "q: [1.2, 0.0]", "initial.q"),
    ("kind: gauss,", "kind: lorentz,", "unknown coupling kind"),
    ("vertex: x", "vertex: y", "unknown vertex"),
    ("dt: 2.0e-3", "dt: fast", "must be a number"),
    ("    x: {polynomial: [0, 0, 0.5, 0, 0.25]}", "    x: {harmonic: 1, polynomial: [1]}", "exactly one"),
])
def test_semantic_errors(old, new, msg):
    with pytest.raises(ScenarioError, match=msg):
        parse_text(SMALL.replace(old, new))


def test_parse_scenario_file_and_preset(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text(SMALL)
    assert parse_scenario(p).name == "small"
    assert parse_scenario("chain3").name == "chain3"
    with pytest.raises(ScenarioError, match="cannot read"):
        parse_scenario(tmp_path / "missing.yaml")
    with pytest.raises(ScenarioError, match="unknown preset"):
        preset_text("chain9")


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir())}


def test_direct_run_artifacts_and_determinism(tmp_path):
    sc = parse_text(SMALL)
    assert run(sc, "direct", tmp_path / "a") == 0
    assert run(sc, "direct", tmp_path / "b") == 0
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert set(a) == {"trajectory.csv", "report.json", "manifest.json"}
    assert a["trajectory.csv"] == b["trajectory.csv"] and a["report.json"] == b["report.json"]
    ma, mb = json.loads(a["manifest.json"]), json.loads(b["manifest.json"])
    ma.pop("timestamp"), mb.pop("timestamp")
    assert ma == mb and set(ma["files"]) == {"trajectory.csv", "report.json"}
    report = json.loads(a["report.json"])
    assert report["assumptions"]["a5_ok"] is True
    assert len(report["critical_set"]["points"]) == 3


def test_analyze_only_is_bit_identical(tmp_path):
    sc = parse_text(SMALL)
    assert run(sc, "direct", tmp_path) == 0
    before = (tmp_path / "report.json").read_bytes()
    (tmp_path / "report.json").unlink()
    assert run(sc, "analyze-only", tmp_path) == 0
    assert (tmp_path / "report.json").read_bytes() == before


def test_analyze_only_without_trajectory(tmp_path):
    assert run(parse_text(SMALL), "analyze-only", tmp_path) == 2


def test_both_mode_writes_oracle_diff(tmp_path):
    assert run(parse_text(SMALL), "both", tmp_path) == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert {"kernel.csv", "trajectory.csv", "trajectory_gle.csv", "oracle_diff.json"} <= names
    diff = json.loads((tmp_path / "oracle_diff.json").read_text())
    assert diff["sup_abs_dq"] < 1e-4
    assert (tmp_path / "kernel.csv").read_text().splitlines()[0] == "tau,w_b"


def test_numerical_failure_exit_code_and_cleanup(tmp_path):
    text = SMALL.replace("sample_every: 10}", "sample_every: 1, max_drift: 1.0e-14}")
    assert run(parse_text(text), "direct", tmp_path) == 3
    assert not any(tmp_path.iterdir())


def test_main_exit_codes(tmp_path, monkeypatch, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("name: [unclosed\n")
    assert main(["run", str(bad)]) == 2
    good = tmp_path / "good.yaml"
    good.write_text(SMALL)
    monkeypatch.setenv(ENV_OUTPUT_ROOT, str(tmp_path / "root"))
    assert main(["run", str(good), "--mode", "direct"]) == 0
    assert (tmp_path / "root" / "small" / "trajectory.csv").exists()
    assert main(["presets"]) == 0
    assert "chain3" in capsys.readouterr().out.split()
    assert main(["show", "chain3"]) == 0
    assert "name: chain3" in capsys.readouterr().out


def test_negative_fixture_runs_with_warning(tmp_path):
    text = preset_text("chain3_lambda2").replace("count: 1024", "count: 128").replace("horizon: 200.0", "horizon: 10.0")
    sc = parse_text(text)
    assert run(sc, "direct", tmp_path) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["assumptions"]["a5_ok"] is False and report["negative_fixture"] is True
    assert report["warnings"]


def test_csv_number_format(tmp_path):
    assert run(parse_text(SMALL), "direct", tmp_path) == 0
    raw = (tmp_path / "trajectory.csv").read_bytes()
    assert b"\r" not in raw
    row = raw.decode().splitlines()[5].split(",")
    assert all(float(v) == float(np.float64(v)) for v in row)
    assert any(len(v.replace("-", "").replace(".", "").lstrip("0")) >= 15 for v in row)
