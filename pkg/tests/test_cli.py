import csv
import json

import pytest

from tvemi.cli import main


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    cfg = d / "c.yaml"
    cfg.write_text("scenario:\n  id: 2\n  n_subjects: 500\n  lambda_E: 0.03\n  lambda_C: 0.07\n")
    assert main(["simulate", "--config", str(cfg), "--seed", "3", "--out-dir", str(d / "out")]) == 0
    return d, cfg


def test_simulate_writes_data_and_manifest(simulated):
    d, _ = simulated
    manifest = json.loads((d / "out" / "manifest.json").read_text())
    assert manifest["arguments"]["seed"] == 3
    with open(d / "out" / "data.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["time", "event", "x1", "x2"] and len(rows) == 501
    assert any("NA" in r for r in rows[1:])


def test_impute_fit_and_test_pipeline(simulated, capsys):
    d, _ = simulated
    data = str(d / "out" / "data.csv")
    imp = d / "imp"
    assert main(["impute", data, "--tve", "x1=rcs3", "--m", "2", "--fcs-iterations", "2", "--seed", "1",
                 "--out-dir", str(imp)]) == 0
    assert main(["fit", str(imp / "imputations.csv"), "--tve", "x1=linear", "--out-dir", str(d / "fit")]) == 0
    assert (d / "fit" / "coefficients.csv").exists() and (d / "fit" / "curve_x1.csv").exists()
    assert main(["fit", str(d / "out" / "complete.csv"), "--out-dir", str(d / "fit1")]) == 0
    assert (d / "fit1" / "model.txt").exists()
    capsys.readouterr()
    assert main(["ph-test", str(imp / "imputations.csv"), "--tve", "rcs3", "--wald", "d1"]) == 0
    out = capsys.readouterr().out
    assert "x1" in out and "x2" in out


def test_smc_imputation_and_selection(simulated):
    d, _ = simulated
    data = str(d / "out" / "data.csv")
    assert main(["impute", data, "--method", "smc", "--tve", "x1=linear", "--m", "2", "--fcs-iterations", "2",
                 "--out-dir", str(d / "smc")]) == 0
    assert main(["select", str(d / "smc" / "imputations.csv"), "--out-dir", str(d / "sel")]) == 0
    assert (d / "sel" / "selection.csv").read_text().startswith("round,covariate")


def test_replicate_and_report(tmp_path, capsys):
    cfg = tmp_path / "r.yaml"
    cfg.write_text("scenario:\n  id: 1\n  n_subjects: 300\n  lambda_E: 0.03\n  lambda_C: 0.07\n"
                   "study:\n  n_reps: 2\n  m: 2\n  fcs_iterations: 2\n  methods: [complete_data, approx]\n"
                   "  workers: 1\n")
    assert main(["replicate", "--config", str(cfg), "--seed", "4", "--out-dir", str(tmp_path / "o")]) == 0
    for f in ("summary.csv", "curves.csv", "manifest.json"):
        assert (tmp_path / "o" / f).exists()
    capsys.readouterr()
    assert main(["report", str(tmp_path / "o")]) == 0
    assert "PH rejection" in capsys.readouterr().out


@pytest.mark.parametrize("argv,code", [
    (["nonsense"], 1),
    (["impute"], 1),
    (["replicate", "--config", "/no/such.yaml", "--out-dir", "x"], 1),
    (["fit", "/no/such.csv", "--out-dir", "x"], 2),
    (["report", "/no/such/dir"], 2),
])
def test_exit_codes(argv, code, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == code


def test_usage_errors_for_bad_flags(simulated, tmp_path):
    d, _ = simulated
    data = str(d / "out" / "data.csv")
    assert main(["impute", data, "--m", "1", "--out-dir", str(tmp_path)]) == 1
    assert main(["impute", data, "--tve", "x9=rcs3", "--m", "2", "--out-dir", str(tmp_path)]) == 1
    bad = tmp_path / "bad.csv"
    bad.write_text("time,event,x\n1,1,zz\n")
    assert main(["fit", str(bad), "--out-dir", str(tmp_path)]) == 2


def test_numerical_failure_exit_code(tmp_path):
    flat = tmp_path / "flat.csv"
    flat.write_text("time,event,x\n" + "".join(f"{i + 1},1,1\n" for i in range(10)))
    assert main(["fit", str(flat), "--out-dir", str(tmp_path / "o")]) == 3
