from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from clothswitch import cli, metrics, pipeline, stopping
from clothswitch.metrics import SIM_REWARD, UNCERTAINTY

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
TINY = str(CONFIGS / "tiny.yaml")


def _run(argv, capsys=None):
    code = cli.main(argv)
    err = capsys.readouterr().err if capsys else ""
    return code, err


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    assert cli.main(["train", "--config", TINY, "--out", str(out)]) == 0
    return out


def _criteria_json(path: Path, criteria) -> Path:
    path.write_text(json.dumps({"criteria": [c.params() for c in criteria]}))
    return path


def _value_criteria(threshold=0.9):
    return [
        stopping.Criterion("reward_value", SIM_REWARD, stopping.VALUE, 1.0,
                           value=stopping.ValueStopConfig(threshold, stopping.AT_LEAST, 10)),
        stopping.Criterion("uncertainty_value", UNCERTAINTY, stopping.VALUE, 1.0,
                           value=stopping.ValueStopConfig(0.5, stopping.AT_MOST, 10)),
    ]


def _write_csv(path: Path, reward, unc=None) -> Path:
    lines = ["iteration,kind,value"]
    for i, v in enumerate(reward, start=1):
        lines.append(f"{i},sim_reward,{v!r}")
        lines.append(f"{i},epistemic_uncertainty,{(unc[i - 1] if unc else 0.1)!r}")
    path.write_text("\n".join(lines) + "\n")
    return path


# --- train ----------------------------------------------------------------


def test_missing_config_exits_2_naming_path(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    code, err = _run(["train", "--config", str(missing), "--out", str(tmp_path / "o")], capsys)
    assert code == 2
    assert str(missing) in json.loads(err)["message"]


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("N: 3\nK: 0\n")
    code, err = _run(["train", "--config", str(bad), "--out", str(tmp_path / "o")], capsys)
    assert code == 2 and json.loads(err)["error"] == "invalid_config"


def test_tiny_train_outputs(tiny_run):
    lines = (tiny_run / "runlog.jsonl").read_text().splitlines()
    assert len(lines) == 3
    rows = list(csv.reader((tiny_run / "metrics.csv").open()))
    assert rows[0] == ["iteration", "kind", "value"] and len(rows) - 1 == 6
    assert any((tiny_run / "snapshots").iterdir())
    assert yaml.safe_load((tiny_run / "config.yaml").read_text())["N"] == 3


def test_repeat_train_same_checksum(tiny_run, tmp_path):
    out = tmp_path / "again"
    assert cli.main(["train", "--config", TINY, "--out", str(out)]) == 0
    assert _sha(out / "metrics.csv") == _sha(tiny_run / "metrics.csv")
    assert _sha(out / "runlog.jsonl") == _sha(tiny_run / "runlog.jsonl")


def test_refuses_overwrite_without_fresh(tiny_run, capsys):
    before = _sha(tiny_run / "metrics.csv")
    code, err = _run(["train", "--config", TINY, "--out", str(tiny_run)], capsys)
    assert code == 2 and json.loads(err)["error"] == "refused_overwrite"
    assert _sha(tiny_run / "metrics.csv") == before


def test_fresh_rebuild_is_idempotent(tmp_path):
    out = tmp_path / "r"
    assert cli.main(["train", "--config", TINY, "--out", str(out), "--seed", "4"]) == 0
    first = _sha(out / "metrics.csv")
    (out / "stray.txt").write_text("x")
    assert cli.main(["train", "--config", TINY, "--out", str(out), "--seed", "4", "--fresh"]) == 0
    assert _sha(out / "metrics.csv") == first and not (out / "stray.txt").exists()


def test_out_root_env_override(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ROOT_ENV, str(tmp_path))
    assert cli.main(["demo-gen", "--config", TINY, "--out", "demos", "--count", "2"]) == 0
    assert (tmp_path / "demos" / "manifest.json").is_file()


def test_divergence_exits_3(tmp_path, monkeypatch, capsys):
    from clothswitch import learner

    def boom(*a, **kw):
        raise learner.DivergenceError("non-finite BC loss")

    monkeypatch.setattr(learner, "update_epoch", boom)
    out = tmp_path / "d"
    code, err = _run(["train", "--config", TINY, "--out", str(out)], capsys)
    assert code == 3 and json.loads(err)["error"] == "divergence"
    assert json.loads((out / "error.json").read_text())["error"] == "divergence"
    assert json.loads((out / "run.json").read_text())["failure"] is not None


# --- stop-scan ------------------------------------------------------------


def test_stop_scan_constant_below_threshold(tmp_path, capsys):
    csv_path = _write_csv(tmp_path / "m.csv", [0.4] * 20)
    crit = _criteria_json(tmp_path / "c.json", _value_criteria(0.9))
    assert cli.main(["stop-scan", "--metrics", str(csv_path), "--criteria", str(crit)]) == 0
    report = {r["criterion"]: r for r in json.loads(capsys.readouterr().out)}
    assert report["reward_value"]["fired_iteration"] is None
    assert report["reward_value"]["reason"] == stopping.NOT_FIRED
    assert report["uncertainty_value"]["fired_iteration"] == 10


def test_stop_scan_out_of_order_names_line(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("iteration,kind,value\n1,sim_reward,0.5\n3,sim_reward,0.5\n2,sim_reward,0.5\n")
    crit = _criteria_json(tmp_path / "c.json", _value_criteria())
    code, err = _run(["stop-scan", "--metrics", str(p), "--criteria", str(crit)], capsys)
    assert code == 2 and "line 4" in json.loads(err)["message"]


def test_stop_scan_bad_value_names_line(tmp_path, capsys):
    p = tmp_path / "bad.csv"
    p.write_text("iteration,kind,value\n1,sim_reward,0.5\n2,sim_reward,oops\n")
    crit = _criteria_json(tmp_path / "c.json", _value_criteria())
    code, err = _run(["stop-scan", "--metrics", str(p), "--criteria", str(crit)], capsys)
    assert code == 2 and "line 3" in json.loads(err)["message"]


def test_stop_scan_reproduces_live_firing(tmp_path):
    from dataclasses import replace

    from clothswitch.config import load_run_config

    rng = np.random.default_rng(0)
    small = replace(load_run_config(TINY), N=12)
    crits = _value_criteria(0.2) + [
        stopping.Criterion("reward_gradient", SIM_REWARD, stopping.GRADIENT, 1.0,
                           gradient=stopping.GradientStopConfig(float(rng.uniform(0.05, 1.0)), 1, 3, 10)),
    ]
    run = tmp_path / "run"
    rl = pipeline.run_training(small, criteria=crits, out_dir=run)
    out = tmp_path / "scan.json"
    assert cli.main(["stop-scan", "--metrics", str(run / "metrics.csv"), "--criteria", str(run / "run.json"), "--out", str(out)]) == 0
    offline = {r["criterion"]: r["fired_iteration"] for r in json.loads(out.read_text())}
    assert offline == rl.fired_iterations()
    assert cli.main(["stop-scan", "--metrics", str(run / "metrics.csv"), "--criteria", str(run / "run.json"), "--out", str(out)]) == 2


# --- deploy-eval and report -----------------------------------------------


def test_report_needs_evaluations(tiny_run, capsys):
    code, err = _run(["report", "--run", str(tiny_run)], capsys)
    assert code == 2 and json.loads(err)["error"] == "missing_evaluations"


def test_deploy_and_report_without_fired_criteria(tiny_run):
    assert cli.main(["deploy-eval", "--run", str(tiny_run)]) == 0
    dep = json.loads((tiny_run / "deployment.json").read_text())
    assert set(dep) == {"1", "2", "3"}
    assert cli.main(["report", "--run", str(tiny_run)]) == 0
    rows = list(csv.DictReader((tiny_run / "report" / "table1.csv").open()))
    assert len(rows) == 1 and rows[0]["row"] == "final_3" and rows[0]["notice"] == "no criterion fired"
    fig4 = list(csv.DictReader((tiny_run / "report" / "fig4.csv").open()))
    assert len(fig4) == 3 * 11
    assert cli.main(["report", "--run", str(tiny_run)]) == 2
    assert cli.main(["report", "--run", str(tiny_run), "--fresh"]) == 0


def test_table1_has_one_row_per_fired_criterion_plus_final(tmp_path):
    rl = pipeline.RunLog("h", 0, 60, pipeline.FULL_HORIZON)
    rl.records = [pipeline.IterationRecord(i, i, 1, 0.0, 0.5, 0.01, False) for i in range(1, 61)]
    names = [c[0] for c in stopping.CRITERIA]
    rl.first_fire = {n: {"iteration": 20 + k, "reason": "value_threshold"} for k, n in enumerate(names)}
    rep = lambda it: pipeline.DeploymentReport(it, [pipeline.EpisodeReport(0, 0.5, 0.8, 3, None, [0.5, 0.8])])
    reports = {it: rep(it) for it in (20, 21, 22, 23, 60)}
    bundle = pipeline.correlation_report(rl, reports)
    cli.write_table1(tmp_path / "t.csv", bundle, reports)
    rows = list(csv.DictReader((tmp_path / "t.csv").open()))
    assert [r["row"] for r in rows] == names + ["final_60"]


def test_fig3_spline_matches_independent_refit(tmp_path):
    from scipy.interpolate import make_smoothing_spline

    rng = np.random.default_rng(2)
    rl = pipeline.RunLog("h", 0, 30, pipeline.FULL_HORIZON)
    rl.records = [pipeline.IterationRecord(i, i, 1, 0.0, float(rng.uniform()), 0.01, False) for i in range(1, 31)]
    cli.write_fig3(tmp_path / "f.csv", rl, SIM_REWARD, 5.0)
    rows = list(csv.DictReader((tmp_path / "f.csv").open()))
    x = np.array([float(r["iteration"]) for r in rows])
    y = np.array([float(r["value"]) for r in rows])
    ref = make_smoothing_spline(x, y, lam=5.0)(x)
    assert np.max(np.abs(np.array([float(r["spline"]) for r in rows]) - ref)) < 1e-6


# --- demo-gen -------------------------------------------------------------


def test_demo_gen_shards_and_manifest(tmp_path):
    out = tmp_path / "demos"
    assert cli.main(["demo-gen", "--config", TINY, "--out", str(out), "--count", "5", "--shard-size", "2", "--seed", "3"]) == 0
    man = json.loads((out / "manifest.json").read_text())
    assert man["count"] == 5 and len(man["shards"]) == 3
    recs = [json.loads(line) for s in man["shards"] for line in (out / s["file"]).read_text().splitlines()]
    assert [r["seed"] for r in recs] == [s for sh in man["shards"] for s in sh["episode_seeds"]]
    assert sum(len(r["steps"]) for r in recs) == man["pairs"]
    assert all(len(st["obs"]) == 32 * 32 and len(st["action"]) == 4 for r in recs for st in r["steps"])


def test_trajectory_records_schema():
    from clothswitch import oracle
    from clothswitch.config import EnvConfig

    cfg = EnvConfig()
    tr = oracle.rollout(oracle.oracle_policy(cfg), cfg, 3)
    recs = cli.trajectory_records(tr)
    assert [r["step"] for r in recs] == list(range(len(tr)))
    assert recs[-1]["done_reason"] == tr.done_reason and all(r["done_reason"] is None for r in recs[:-1])
    assert set(recs[0]) == {"seed", "step", "action", "coverage", "done_reason"}


def test_metric_series_export_is_stable(tiny_run):
    series = pipeline.read_metrics_csv(tiny_run / "metrics.csv")
    rl = pipeline.RunLog.read(tiny_run)
    assert series[UNCERTAINTY].values == rl.series(UNCERTAINTY).values
    assert isinstance(series[SIM_REWARD], metrics.MetricSeries)
