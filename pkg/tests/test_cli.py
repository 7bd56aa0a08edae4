import csv

import pytest
import yaml

from excavplan import cli
from excavplan.harness import bundled_scenarios
from excavplan.plant import SimulationDiverged


def _write(tmp_path, name, mutate):
    doc = yaml.safe_load([p for p in bundled_scenarios() if p.stem == "deep"][0].read_text())
    doc["name"] = name
    mutate(doc)
    path = tmp_path / f"{name}.yaml"
    path.write_text(yaml.safe_dump(doc))
    return str(path)


def test_check_bundled(capsys):
    assert cli.main(["check"]) == 0
    out = capsys.readouterr().out
    assert "shallow: ok" in out and "deep: ok" in out


def test_check_bad_config(tmp_path, capsys):
    bad = _write(tmp_path, "bad", lambda d: d["mpc"].update(horizon=-3))
    assert cli.main(["check", "--config", bad]) == 2
    assert "mpc.horizon" in capsys.readouterr().err
    assert cli.main(["check", "--config", str(tmp_path / "nope.yaml")]) == 2


def test_duplicate_names_rejected():
    assert cli.main(["check", "--config", "deep", "--config", "deep"]) == 2


def test_plan_writes_trajectory(tmp_path):
    assert cli.main(["plan", "--config", "shallow", "--out", str(tmp_path), "--quiet"]) == 0
    with open(tmp_path / "shallow" / "trajectory.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["t", "psi_U", "L_B", "L_A", "L_K", "dpsi_U", "dL_B", "dL_A", "dL_K", "phase"]
    assert len(rows) > 100
    assert (tmp_path / "shallow" / "plan_report.json").exists()


def test_planning_failure_exit_code(tmp_path):
    # start stroke beyond the cylinder box
    cfg = _write(tmp_path, "stroke", lambda d: d.update(start={"swing_rad": 0.0, "cylinder": [3.3, 2.5, 2.0]}))
    assert cli.main(["plan", "--config", cfg, "--out", str(tmp_path), "--quiet"]) == 3


def test_divergence_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise SimulationDiverged("test")
    monkeypatch.setattr(cli, "run_scenario", boom)
    assert cli.main(["run", "--config", "shallow", "--out", str(tmp_path), "--quiet"]) == 4


def test_seed_range():
    assert cli.main(["check", "--seed", "-1"]) == 2
    with pytest.raises(SystemExit):
        cli.main(["frobnicate"])
