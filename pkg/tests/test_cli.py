import json

import pytest

from solerwave.cli import (
    EXIT_CONFIG, EXIT_INCONSISTENT, EXIT_OK, ConfigError, build_dashboard, load_config, main, normalize_config,
    parse_family,
)


def _small(tmp_path, text=""):
    path = tmp_path / "small.toml"
    path.write_text("[grid]\nN = 200\nR_max = 20.0\n" + text)
    return str(path)


def test_unknown_keys_and_types_are_rejected():
    with pytest.raises(ConfigError):
        normalize_config({"gird": {}})
    with pytest.raises(ConfigError):
        normalize_config({"grid": {"n": 10}})
    with pytest.raises(ConfigError):
        normalize_config({"grid": {"N": "many"}})
    assert normalize_config({"grid": {"R_max": 20}})["grid"]["R_max"] == 20.0


def test_json_config(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"seed": 7, "profile": {"omega": 0.85}}))
    cfg = load_config(str(path))
    assert cfg["seed"] == 7 and cfg["profile"]["omega"] == 0.85


def test_family_parsing():
    assert parse_family("0.8:0.9:0.05") == pytest.approx([0.8, 0.85, 0.9])
    with pytest.raises(ConfigError):
        parse_family("0.8:0.9")


def test_malformed_config_exits_with_config_code(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[grid\nN = ")
    assert main(["profile", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_profile_command(tmp_path):
    out = tmp_path / "o"
    assert main(["profile", "--omega", "0.9", "--config", _small(tmp_path), "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "profile.json").read_text())
    assert doc["residual"] < 1e-8
    hdr = doc["header"]
    assert hdr["command"] == "profile" and hdr["seed"] == 0 and len(hdr["config_hash"]) > 8
    assert doc["config"]["grid"]["N"] == 200
    lines = (out / "profile.csv").read_text().splitlines()
    assert lines[0].startswith("# ")
    assert "rho,a,b" in lines


def test_output_dir_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("SOLERWAVE_OUTPUT_DIR", str(tmp_path / "env"))
    assert main(["profile", "--omega", "0.9", "--config", _small(tmp_path)]) == EXIT_OK
    assert (tmp_path / "env" / "profile.json").exists()


def test_family_command(tmp_path):
    out = tmp_path / "f"
    assert main(["profile", "--family", "0.88:0.9:0.01", "--config", _small(tmp_path), "--out", str(out)]) == EXIT_OK
    doc = json.loads((out / "family.json").read_text())
    assert "H3" in doc["verdicts"]
    rows = [ln for ln in (out / "family.csv").read_text().splitlines() if not ln.startswith("#")]
    assert rows[0] == "omega,q,qprime" and len(rows) == 4


def _doc(command, omega, verdicts=None):
    return {"header": {"command": command}, "omega": omega, "verdicts": verdicts or {}}


def test_dashboard_without_spectrum():
    dash = build_dashboard({"profile": ("p.json", _doc("profile", 0.9, {"H1": {"holds": True}}))})
    hyp = dash["hypotheses"]
    assert hyp["H1"]["status"] == "holds"
    assert hyp["H5"]["status"] == "not evaluated" and hyp["H6"]["status"] == "not evaluated"


def test_report_with_conflicting_omega(tmp_path):
    a, b = tmp_path / "profile.json", tmp_path / "fgr.json"
    a.write_text(json.dumps(_doc("profile", 0.9)))
    b.write_text(json.dumps(_doc("fgr", 0.85)))
    assert main(["report", str(a), str(b), "--out", str(tmp_path)]) == EXIT_INCONSISTENT


def test_report_writes_a_dashboard(tmp_path):
    a = tmp_path / "profile.json"
    a.write_text(json.dumps(_doc("profile", 0.9, {"H1": {"holds": True}, "H2": {"holds": False}})))
    assert main(["report", str(a), "--out", str(tmp_path)]) == EXIT_OK
    text = (tmp_path / "dashboard.txt").read_text()
    assert "H2: violated" in text and "H5: not evaluated" in text
