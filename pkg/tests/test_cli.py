import csv

import pytest

from ventriq.cli import main


def test_help_and_version(capsys):
    assert main(["--help"]) == 0
    assert "phantom" in capsys.readouterr().out
    assert main(["--version"]) == 0
    assert main(["run", "--help"]) == 0


def test_usage_errors():
    assert main(["bogus"]) == 1
    assert main([]) == 1
    assert main(["run", "--manifest", "m.csv"]) == 1  # missing required options


def test_data_error_exit_code(tmp_path):
    bad = tmp_path / "manifest.csv"
    bad.write_text("not,a,manifest\n")
    assert main(["train", "--manifest", str(bad), "--out", str(tmp_path / "models")]) == 2


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("no_such_key = 3\n")
    assert main(["--config", str(cfg), "phantom", "--out", str(tmp_path / "c"), "--n-subjects", "1"]) == 2


def test_run_rejects_zero_workers(tmp_path):
    assert main(["run", "--manifest", "m", "--models", "x", "--workers", "0", "--out", str(tmp_path / "r.csv"),
                 "--report", str(tmp_path / "rep.csv")]) == 1


@pytest.mark.slow
def test_full_chain(tmp_path):
    c = tmp_path / "cohort"
    m = str(c / "manifest.csv")
    assert main(["--seed", "71", "phantom", "--out", str(c), "--n-subjects", "20"]) == 0
    assert main(["--config", _cfg(tmp_path), "train", "--manifest", m, "--out", str(tmp_path / "models")]) == 0
    res = tmp_path / "results.csv"
    assert main(["run", "--manifest", m, "--models", str(tmp_path / "models"), "--out", str(res),
                 "--report", str(tmp_path / "report.csv"), "--no-timing"]) == 0
    assert (tmp_path / "results_shapes").is_dir()
    rows = list(csv.DictReader(res.open()))
    assert len(rows) == 20 and all(r["t_total_ms"] == "" for r in rows)
    assert sum(r["status"] == "passed" for r in rows) >= 18
    assert (tmp_path / "report.json").exists()
    assert main(["eval", "--manifest", m, "--shapes", str(tmp_path / "results_shapes"), "--out",
                 str(tmp_path / "metrics.csv"), "--manual", str(tmp_path / "manual.csv")]) == 0
    dsc = [float(r["dsc"]) for r in csv.DictReader((tmp_path / "metrics.csv").open()) if r["structure"] == "LV_endo"]
    assert sum(dsc) / len(dsc) >= 0.9
    assert main(["stats", "--results", str(res), "--manual", str(tmp_path / "manual.csv"), "--out",
                 str(tmp_path / "stats")]) == 0
    for name in ("reference_ranges.csv", "bland_altman.csv", "ks_tests.csv", "plot_LVEDV_ml.csv"):
        assert (tmp_path / "stats" / name).exists(), name


def _cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# smaller forests keep the test quick\nn_trees = 20\n")
    return str(p)
