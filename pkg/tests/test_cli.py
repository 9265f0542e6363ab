import json
import math

import pytest

from phlab.cli_experiments import ExperimentConfig, compare_golden, main, run
from phlab.map_registry import MapSpec, example4_map, named_map

from conftest import LAM_C_B


def _run(tmp_path, *argv):
    return main([*argv, "--out", str(tmp_path), "--quiet"])


def _report(path):
    return json.loads((path / "report.json").read_text())


def test_exponents_report(tmp_path):
    assert _run(tmp_path, "exponents") == 0
    rep = _report(tmp_path)
    assert rep["status"] == "ok"
    assert abs(rep["results"]["value"] - math.log(LAM_C_B)) <= 1e-3
    assert rep["config"]["map"] == "f_B"
    meta = json.loads((tmp_path / "metadata.json").read_text())
    assert {"wall_time_s", "numpy", "rng", "seed"} <= set(meta)


def test_certify_cones_from_config(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"map": "f_A", "params": {"slopes": [-0.5, 0.5]}}))
    assert main(["certify-cones", "--config", str(cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 0
    cert = _report(tmp_path / "o")["results"]["certificate"]
    assert cert["verified"] and cert["sigma"] >= 2.68


def test_invertible_matrix_exits_2(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"map": {"kind": "linear", "matrix": [2, 1, 1, 1]}}))
    assert main(["exponents", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "|det| >= 2" in err and "det = 1" in err


@pytest.mark.parametrize("argv", [["stopping-times", "--grid", "8"], ["exponents", "--map", "f_Z"],
                                  ["exponents", "--seed", "-1"]])
def test_schema_errors_exit_2(tmp_path, argv):
    assert _run(tmp_path, *argv) == 2


def test_unknown_parameter_exits_2(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"params": {"n_iterations": 5}}))
    assert main(["exponents", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 2
    cfg.write_text("{not json")
    assert main(["exponents", "--config", str(cfg), "--out", str(tmp_path), "--quiet"]) == 2


def test_numerical_failure_writes_failed_report(tmp_path):
    assert _run(tmp_path, "drift", "--map", "f_B") == 3
    rep = _report(tmp_path)
    assert rep["status"] == "failed" and rep["error"] == "DegenerateCoupling"


def test_thread_cap_validation(tmp_path, monkeypatch):
    monkeypatch.setenv("PHLAB_THREADS", "zero")
    assert _run(tmp_path, "specialness") == 2
    monkeypatch.setenv("PHLAB_THREADS", "1")
    assert _run(tmp_path, "specialness") == 0
    assert json.loads((tmp_path / "metadata.json").read_text())["threads"] == 1


def test_reruns_are_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["unstable-arc", "--map", "example4", "--seed", "3", "--out", str(tmp_path / name),
                     "--quiet"]) == 0
    assert (tmp_path / "a" / "arc.csv").read_bytes() == (tmp_path / "b" / "arc.csv").read_bytes()
    ra, rb = _report(tmp_path / "a"), _report(tmp_path / "b")
    ra["config"].pop("output_dir"), rb["config"].pop("output_dir")
    assert ra == rb


def test_config_round_trip():
    cfg = ExperimentConfig.from_dict({"map": "example3", "params": {"samples": 8}, "seed": 5}, "specialness")
    again = ExperimentConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.map == named_map("example3")
    custom = MapSpec("linear", (2, 1, 1, 3), name="mine")
    d = ExperimentConfig("exponents", custom).to_dict()
    assert d["map"] == {"kind": "linear", "matrix": [2, 1, 1, 3]}
    assert ExperimentConfig.from_dict(d).map == custom
    eps = example4_map(eps=0.02)
    assert isinstance(ExperimentConfig("drift", eps).to_dict()["map"], dict)


def test_run_echoes_config():
    cfg = ExperimentConfig.from_dict({"params": {"samples": 4, "depth": 12}}, "specialness")
    bundle = run(cfg)
    assert bundle.report["config"] == cfg.to_dict()
    assert bundle.tables["angles"].header == ["word", "theta"]


def test_compare_golden_cases():
    rep = {"results": {"value": 1.0, "rows": [1, 2], "name": "x"}}
    assert compare_golden(rep, rep) == (True, [])
    worse = {"results": {"value": 1.1, "rows": [1, 2], "name": "x"}}
    ok, listing = compare_golden(worse, rep, {"results.value": 0.05})
    assert not ok and any("results.value" in line for line in listing)
    assert compare_golden(worse, rep, {"results.value": 0.2})[0]
    ok, listing = compare_golden({"results": {"value": 1.0 + 1e-15, "rows": [1, 2], "name": "x"}}, rep)
    assert not ok  # no tolerance: strict equality
    ok, listing = compare_golden({"results": {"value": 1.0, "rows": [1, 2]}}, rep)
    assert listing == ["MISSING in report: results.name"]


def test_compare_golden_cli(tmp_path):
    assert _run(tmp_path / "r", "specialness") == 0
    report = tmp_path / "r" / "report.json"
    assert main(["compare-golden", str(report), str(report), "--quiet"]) == 0
    golden = _report(tmp_path / "r")
    golden["results"]["specialness"]["angle_spread"] += 1.0
    g = tmp_path / "g.json"
    g.write_text(json.dumps(golden))
    assert main(["compare-golden", str(report), str(g), "--quiet"]) == 1
    tol = tmp_path / "tol.json"
    tol.write_text(json.dumps({"results.specialness.angle_spread": 2.0}))
    assert main(["compare-golden", str(report), str(g), "--tolerances", str(tol), "--quiet"]) == 0
    assert main(["compare-golden", str(tmp_path / "nope.json"), str(g), "--quiet"]) == 2
