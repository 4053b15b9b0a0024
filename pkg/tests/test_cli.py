import csv
import json
import os
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from transfer_itr.cli import main
from transfer_itr.pipeline import SCHEMAS, load_schema

SMALL_GA = {"population_size": 40, "generations": 8, "restarts": 1}


def check(obj, name):
    jsonschema.validate(obj, load_schema(name))


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--out", str(d), "--seed", "5", "--n-general", "12000", "--n-target", "3000"]) == 0
    return d


@pytest.fixture
def run_config(sim_dir, tmp_path):
    cfg = {
        "source": str(sim_dir / "source.csv"),
        "target": str(sim_dir / "target.csv"),
        "output_dir": str(tmp_path / "out"),
        "ga": SMALL_GA,
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(cfg))
    return path


def _strip_timings(path):
    report = json.loads(path.read_text())
    report.pop("timings")
    return json.dumps(report, sort_keys=True)


@pytest.mark.parametrize("name", SCHEMAS)
def test_shipped_schemas_are_valid(name):
    jsonschema.Draft202012Validator.check_schema(load_schema(name))


def test_simulate_outputs(sim_dir, capsys):
    code, out, _ = run_cli(capsys, "simulate", "--out", sim_dir / "again", "--seed", 5,
                           "--n-general", 12000, "--n-target", 3000)
    assert code == 0
    meta = json.loads(out)
    check(meta, "sim_meta")
    for name in ("general.csv", "source.csv", "target.csv", "truth.csv", "sim_meta.json"):
        assert (sim_dir / name).is_file()
    with open(sim_dir / "truth.csv") as fh:
        assert next(csv.reader(fh)) == ["id", "y0", "y1", "true_propensity", "true_optimal"]
    assert (sim_dir / "source.csv").read_bytes() == (sim_dir / "again" / "source.csv").read_bytes()


def test_calibrate_weights_sum_to_one(sim_dir, tmp_path, capsys):
    w = tmp_path / "w.csv"
    code, out, _ = run_cli(capsys, "calibrate", "--source", sim_dir / "source.csv",
                           "--target", sim_dir / "target.csv", "--out", w,
                           "--plot-data", tmp_path / "plots")
    assert code == 0
    summary = json.loads(out)
    check(summary, "calibrate")
    weights = np.loadtxt(w, delimiter=",", skiprows=1)[:, 1]
    assert abs(weights.sum() - 1) < 1e-12
    assert np.all(weights > 0)
    assert summary["weights"]["max_abs_residual"] < 1e-8
    assert (tmp_path / "plots" / "balance.csv").read_text().startswith("name,source_mean")


def test_estimate_keys(sim_dir, capsys):
    code, out, _ = run_cli(capsys, "estimate", "--source", sim_dir / "source.csv")
    assert code == 0
    est = json.loads(out)
    check(est, "estimate")
    assert {"naive", "ipw", "or", "aipw"} <= set(est)


def test_optimize_value_importance_chain(sim_dir, tmp_path, capsys):
    rule_path = tmp_path / "rule.json"
    code, out, _ = run_cli(capsys, "optimize", "--source", sim_dir / "source.csv",
                           "--target", sim_dir / "target.csv", "--seed", 1,
                           "--population-size", 40, "--generations", 8, "--restarts", 1,
                           "--rule-out", rule_path, "--plot-data", tmp_path / "plots")
    assert code == 0
    opt = json.loads(out)
    check(opt, "optimize")
    assert opt["weighted"] is True
    rule = json.loads(rule_path.read_text())
    check(rule, "rule")
    assert (tmp_path / "plots" / "ga_history.csv").is_file()

    code, out, _ = run_cli(capsys, "value", "--rule", rule_path, "--source", sim_dir / "source.csv",
                           "--target", sim_dir / "target.csv")
    assert code == 0
    val = json.loads(out)
    check(val, "value")
    assert val["value"] == pytest.approx(opt["ga"]["best_value"], abs=1e-10)

    code, out, _ = run_cli(capsys, "importance", "--rule", rule_path, "--data", sim_dir / "target.csv")
    assert code == 0
    ranking = json.loads(out)
    check(ranking, "importance")
    assert sorted(r["name"] for r in ranking) == ["age", "height"]
    mags = [abs(r["adjusted_coefficient"]) for r in ranking]
    assert mags == sorted(mags, reverse=True)


def test_optimize_unweighted(sim_dir, capsys):
    code, out, _ = run_cli(capsys, "optimize", "--source", sim_dir / "source.csv", "--unweighted",
                           "--seed", 2, "--generations", 3, "--population-size", 20, "--restarts", 1)
    assert code == 0
    assert json.loads(out)["weighted"] is False


def test_run_writes_report_and_rules(run_config, tmp_path, capsys):
    code, out, _ = run_cli(capsys, "run", "--config", run_config, "--seed", 7, "--plot-data")
    assert code == 0
    outdir = tmp_path / "out"
    report = json.loads((outdir / "report.json").read_text())
    check(report, "report")
    assert "weighted" in report and "unweighted" in report
    assert out.strip() == report["weighted"]["inequality"]
    assert out.startswith("0 < ")
    assert (outdir / "rule.txt").read_text().strip() == out.strip()
    check(json.loads((outdir / "rule.json").read_text()), "rule")
    check(json.loads((outdir / "rule_unweighted.json").read_text()), "rule")
    assert (outdir / "ga_history.csv").read_text().startswith("run,step,best_value")
    assert (outdir / "balance.csv").is_file()
    assert report["config"]["seed"] == 7
    assert report["config"]["ga"]["seed"] == 7


def test_run_is_deterministic_apart_from_timings(run_config, tmp_path, capsys):
    report = tmp_path / "out" / "report.json"
    assert run_cli(capsys, "run", "--config", run_config, "--seed", 7)[0] == 0
    first = _strip_timings(report)
    assert run_cli(capsys, "run", "--config", run_config, "--seed", 7)[0] == 0
    assert _strip_timings(report) == first


def test_config_echo_reproduces_run(run_config, tmp_path, capsys):
    assert run_cli(capsys, "run", "--config", run_config, "--seed", 11)[0] == 0
    report_path = tmp_path / "out" / "report.json"
    first = _strip_timings(report_path)
    echo = tmp_path / "echo.json"
    echo.write_text(json.dumps(json.loads(report_path.read_text())["config"]))
    assert run_cli(capsys, "run", "--config", echo)[0] == 0
    assert _strip_timings(report_path) == first


def test_missing_outcome_column_exits_2(sim_dir, tmp_path, capsys):
    rows = list(csv.reader(open(sim_dir / "source.csv")))
    keep = [i for i, c in enumerate(rows[0]) if c != "outcome"]
    bad = tmp_path / "no_outcome.csv"
    with open(bad, "w", newline="") as fh:
        csv.writer(fh).writerows([[r[i] for i in keep] for r in rows])
    out = tmp_path / "failed"
    code, _, err = run_cli(capsys, "run", "--source", bad, "--target", sim_dir / "target.csv", "--out", out)
    assert code == 2
    assert "outcome" in err
    partial = json.loads((out / "report.json").read_text())
    check(partial, "report")
    assert partial["failed_stage"] == "load"


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["estimate", "--source", "x.csv", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", "--config", tmp_path / "nope.json")
    assert code == 2
    assert "nope.json" in err


def test_unknown_config_key_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"source": "s.csv", "bogus": 1}))
    code, _, err = run_cli(capsys, "run", "--config", cfg)
    assert code == 2
    assert "bogus" in err


def test_help_documents_every_flag(capsys):
    for sub in ("simulate", "calibrate", "estimate", "value", "optimize", "importance", "run"):
        with pytest.raises(SystemExit) as exc:
            main([sub, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert "usage: itr " + sub in text


def test_results_independent_of_thread_count(sim_dir, tmp_path):
    outputs = []
    for threads in ("1", "4"):
        env = {**os.environ, "ITR_THREADS": threads}
        proc = subprocess.run(
            [sys.executable, "-m", "transfer_itr.cli", "optimize", "--source", str(sim_dir / "source.csv"),
             "--target", str(sim_dir / "target.csv"), "--seed", "3", "--population-size", "30",
             "--generations", "5", "--restarts", "2"],
            capture_output=True, text=True, env=env, check=True,
        )
        outputs.append(proc.stdout)
    assert outputs[0] == outputs[1]


def test_infeasible_calibration_reports_stage(sim_dir, tmp_path, capsys):
    far = tmp_path / "far_target.csv"
    far.write_text("id,height,age\n1,200,300\n2,210,310\n")
    out = tmp_path / "failed"
    code, _, err = run_cli(capsys, "run", "--source", sim_dir / "source.csv", "--target", far, "--out", out)
    assert code == 1
    assert "calibrate" in err
    partial = json.loads((out / "report.json").read_text())
    check(partial, "report")
    assert partial["failed_stage"] == "calibrate"
    assert "validation" in partial
