import json
import math

import numpy as np
import pytest

from qflow import acceptance
from qflow.cli import main
from qflow.config import ConfigError, parse_config, reference_config, validate_config
from qflow.forms import q_round_total
from qflow.suite import RunRecord, emit_report, load_snapshot, run_suite, save_snapshot

SMALL = {"geometry": {"grid": 16, "trunc": 4}, "experiment": {"reps": 1000, "seed": 3}}


def test_reference_config_derived_values():
    cfg = reference_config()
    assert cfg.status == "ok"
    assert cfg.derived["a_n"] == pytest.approx(1 / (2 * math.pi))
    assert cfg.derived["gamma"] == pytest.approx(1 / math.sqrt(math.pi))
    assert cfg.derived["sigma_bound"] == pytest.approx(4 * math.pi)
    assert cfg.derived["q_round_total"] == pytest.approx(4 * math.pi)


def test_round_sphere_totals():
    assert q_round_total(2) == pytest.approx(4 * math.pi)
    assert q_round_total(4) == pytest.approx(16 * math.pi ** 2)


def test_sigma_at_bound_is_exploratory():
    cfg = validate_config({"model": {"sigma": math.sqrt(4 * math.pi) * 1.0001}})
    assert cfg.status == "exploratory"
    assert cfg.warnings


def test_n4_bound():
    cfg = validate_config({"geometry": {"n": 4, "grid": 8, "trunc": 3}})
    assert cfg.derived["sigma_bound"] == pytest.approx(8 * math.pi ** 2)
    assert cfg.derived["sigma_bound"] == pytest.approx(78.957, abs=1e-3)


@pytest.mark.parametrize("bad", [
    {"geometry": {"n": 3}},
    {"geometry": {"grid": 8, "trunc": 8}},
    {"geometry": {"grid": 48, "trunc": 8}},
    {"model": {"gamma": 0.9}},
    {"model": {"f": -1.0}},
    {"model": {"flavor": "LQF", "f": 1.0}},
    {"model": {"flavor": "XQF"}},
    {"model": {"sigma": 0.0}},
    {"model": {"f": {"const": 1.0, "modes": [[1, 0, "tan", 0.1]]}}},
    {"bogus": {}},
    {"model": {"nonsense": 1}},
])
def test_hard_config_errors(bad):
    with pytest.raises(ConfigError):
        validate_config(bad)


def test_f_from_modes():
    cfg = validate_config({"model": {"f": {"const": 1.0, "modes": [[1, 0, "cos", 0.5]]}}})
    assert cfg.derived["f_max"] == pytest.approx(1.5)
    assert cfg.derived["f_min"] == pytest.approx(0.5)


def test_json_round_trip_and_hash(tmp_path):
    cfg = validate_config(SMALL)
    again = parse_config(cfg.to_json())
    assert again.to_dict() == cfg.to_dict()
    assert validate_config(again).config_hash() == cfg.config_hash()
    path = tmp_path / "cfg.json"
    path.write_text(cfg.to_json())
    assert parse_config(path).config_hash() == cfg.config_hash()
    other = validate_config({**SMALL, "experiment": {"seed": 4}})
    assert other.config_hash() != cfg.config_hash()


def test_feller_flags_in_derived():
    cfg = validate_config({"geometry": {"q_ref_const": -0.05}, "model": {"flavor": "LQF", "f": -0.05, "sigma": 0.5}})
    assert cfg.derived["feller_flag"] and cfg.derived["feller_exact"]


def test_empty_experiment_list_gives_empty_record():
    record = run_suite(validate_config(SMALL))
    assert record.experiments == [] and record.hard_failures == []


def test_record_hash_is_deterministic(tmp_path):
    cfg = validate_config({**SMALL, "experiment": {"checks": [1, 3], "seed": 3}})
    a, b = run_suite(cfg), run_suite(cfg)
    assert a.record_hash() == b.record_hash()
    assert all(a.passed.values())
    for fmt in ("json", "csv", "md"):
        assert emit_report(a, fmt, tmp_path).exists()
    body = json.loads((tmp_path / "record.json").read_text())
    assert body["record_hash"] == a.record_hash()
    with pytest.raises(ValueError):
        emit_report(a, "xml", tmp_path)
    with pytest.raises(ValueError):
        run_suite(cfg, "nightly")


def test_hard_failures_exclude_soft():
    rec = RunRecord("h", 0, "v", {}, [{"name": "a", "passed": False, "soft": True},
                                      {"name": "b", "passed": False, "soft": False}])
    assert rec.hard_failures == ["b"]


def test_snapshot_round_trip(tmp_path):
    arr = np.arange(12.0).reshape(3, 4) ** 1.5
    raw, head = save_snapshot(tmp_path / "snap", arr, {"t": 0.5})
    back, header = load_snapshot(tmp_path / "snap")
    assert np.array_equal(back, arr)
    assert header["endianness"] == "little" and header["meta"]["t"] == 0.5
    assert raw.stat().st_size == arr.nbytes


def test_criterion_failure_is_recorded_not_raised():
    def broken(seed=0):
        raise RuntimeError("boom")

    acceptance.CRITERIA.append(broken)
    try:
        res = acceptance.run_criterion(broken)
    finally:
        acceptance.CRITERIA.remove(broken)
    assert not res.passed and "boom" in res.error
    assert "[FAIL]" in res.line()


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(SMALL))
    return path


def test_cli_validate_and_config_error(cfg_file, tmp_path, capsys):
    assert main(["validate", str(cfg_file)]) == 0
    assert '"status": "ok"' in capsys.readouterr().out
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"geometry": {"n": 3}}))
    assert main(["validate", str(bad)]) == 2
    assert main(["validate", str(tmp_path / "missing.json")]) == 2


def test_cli_env_output_dir(cfg_file, tmp_path, monkeypatch):
    out = tmp_path / "env_out"
    monkeypatch.setenv("QFLOW_OUTPUT_DIR", str(out))
    assert main(["gmc", "build", str(cfg_file)]) == 0
    assert (out / "gmc_masses.bin").exists()
    masses, header = load_snapshot(out / "gmc_masses")
    assert masses.shape == (16, 16)
    assert header["meta"]["gamma"] == pytest.approx(1 / math.sqrt(math.pi))


def test_cli_flows_and_volume_tools(cfg_file, tmp_path):
    out = tmp_path / "o"
    cfg = json.loads(cfg_file.read_text())
    cfg["scheme"] = {"dt": 1e-2, "T": 0.1}
    cfg["output"] = {"cadence": 5}
    cfg_file.write_text(json.dumps(cfg))
    assert main(["flow", "det", str(cfg_file), "--out", str(out)]) == 0
    assert main(["flow", "sto", str(cfg_file), "--paths", "5", "--out", str(out)]) == 0
    assert (out / "flow_det.csv").exists() and (out / "flow_sto.json").exists()
    assert main(["vol", "besq", "--n", "500", "--out", str(out)]) == 0
    assert main(["vol", "compare", str(out / "besq.csv"), str(out / "besq.csv"), "--out", str(out)]) == 0
    assert main(["vol", "cir", "--a", "1.0", "--out", str(out)]) == 2


def test_cli_checks(cfg_file, tmp_path):
    out = tmp_path / "c"
    cfg = json.loads(cfg_file.read_text())
    cfg["geometry"] = {"grid": 8, "trunc": 3, "q_ref_const": 0.01}
    cfg["scheme"] = {"window_eps": 0.05}
    cfg["experiment"] = {"reps": 20_000, "seed": 1}
    cfg_file.write_text(json.dumps(cfg))
    assert main(["check", "ibp", str(cfg_file), "--out", str(out)]) in (0, 1)
    body = json.loads((out / "check_ibp.json").read_text())
    assert body["ess"] >= 100
    assert main(["measure", "sample", str(cfg_file), "--chains", "8", "--length", "5", "--out", str(out)]) == 0
