"""Command-line front end.

Exit codes: 0 success, 2 invalid input (config, CSV, arguments, refused overwrite),
3 training divergence.  Failures print a one-line JSON error to stderr and, when
an output directory is known, also write it to error.json there.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import cloth, metrics, oracle, pipeline, stopping
from .config import ConfigError, RunConfig, config_hash, load_run_config, to_dict

OUT_ROOT_ENV = "CLOTHSWITCH_OUT"
EXIT_OK, EXIT_INPUT, EXIT_DIVERGED = 0, 2, 3


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.kind, self.code = kind, code


def _resolve_out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUT_ROOT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _prepare_out(path: Path, fresh: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not fresh:
            raise CliError("refused_overwrite", f"{path} is not empty; pass --fresh to rebuild it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(path: str, seed: int | None) -> RunConfig:
    try:
        cfg = load_run_config(path)
    except ConfigError as exc:
        raise CliError("invalid_config", str(exc)) from exc
    return cfg if seed is None else replace(cfg, seed=seed)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_config_file(run_dir: Path) -> RunConfig:
    path = run_dir / "config.yaml"
    try:
        return load_run_config(path)
    except ConfigError as exc:
        raise CliError("invalid_run_dir", str(exc)) from exc


def _criteria_file(path: Path) -> list[stopping.Criterion]:
    try:
        blob = json.loads(Path(path).read_text())
        return [stopping.criterion_from_params(c) for c in blob["criteria"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError("invalid_criteria", f"cannot read criteria from {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    out = _prepare_out(_resolve_out(args.out), args.fresh)
    (out / "config.yaml").write_text(yaml.safe_dump(to_dict(cfg), sort_keys=True))
    criteria = []
    if args.calibration:
        criteria = _criteria_file(Path(args.calibration))
    elif cfg.N >= cfg.stopping.min_history and not args.no_criteria:
        logging.info("no calibration given; running the reference run on tuning seed %d", cfg.tuning_seed)
        try:
            record, criteria = pipeline.calibrate(cfg, out / "reference")
        except pipeline.TrainingFailure as exc:
            raise CliError("divergence", f"reference run: {exc}", EXIT_DIVERGED) from exc
        _write_json(out / "calibration.json", pipeline.calibration_to_dict(cfg, record, criteria))
    else:
        logging.info("criteria disabled (N=%d, min_history=%d)", cfg.N, cfg.stopping.min_history)
    try:
        pipeline.run_training(cfg, args.mode, criteria, args.criterion, out)
    except pipeline.TrainingFailure as exc:
        raise CliError("divergence", str(exc), EXIT_DIVERGED) from exc
    except ValueError as exc:
        raise CliError("invalid_arguments", str(exc)) from exc
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _load_config(args.config, None)
    out = _prepare_out(_resolve_out(args.out), args.fresh)
    try:
        record, criteria = pipeline.calibrate(cfg, out / "reference")
    except pipeline.TrainingFailure as exc:
        raise CliError("divergence", str(exc), EXIT_DIVERGED) from exc
    _write_json(out / "calibration.json", pipeline.calibration_to_dict(cfg, record, criteria))
    return EXIT_OK


def stop_scan(series: dict[str, metrics.MetricSeries], criteria: list[stopping.Criterion]) -> list[dict]:
    out = []
    for c in criteria:
        d = stopping.scan(c, series[c.metric])
        out.append({
            "criterion": c.name,
            "fired_iteration": d.iteration if d is not None and d.fired else None,
            "reason": d.reason if d is not None else stopping.NOT_FIRED,
            "diagnostic": None if d is None else d.diagnostic,
        })
    return out


def cmd_stop_scan(args) -> int:
    try:
        series = pipeline.read_metrics_csv(args.metrics)
    except (OSError, pipeline.CsvFormatError) as exc:
        raise CliError("invalid_csv", f"{args.metrics}: {exc}") from exc
    report = stop_scan(series, _criteria_file(Path(args.criteria)))
    text = json.dumps(report, indent=2) + "\n"
    if args.out:
        out = _resolve_out(args.out)
        if out.exists() and not args.fresh:
            raise CliError("refused_overwrite", f"{out} exists; pass --fresh to replace it")
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_deploy_eval(args) -> int:
    run_dir = _resolve_out(args.run)
    cfg = _run_config_file(run_dir)
    target_path = run_dir / "deployment.json"
    if target_path.exists() and not args.fresh:
        raise CliError("refused_overwrite", f"{target_path} exists; pass --fresh to replace it")
    runlog = pipeline.RunLog.read(run_dir)
    try:
        reports = pipeline.deploy_checkpoints(cfg, runlog, run_dir)
    except FileNotFoundError as exc:
        raise CliError("missing_snapshot", str(exc)) from exc
    _write_json(target_path, {str(k): r.to_dict() for k, r in reports.items()})
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = _resolve_out(args.run)
    cfg = _run_config_file(run_dir)
    runlog = pipeline.RunLog.read(run_dir)
    dep = run_dir / "deployment.json"
    if not dep.exists():
        missing = sorted(runlog.checkpoints)
        raise CliError("missing_evaluations", f"no deployment.json; checkpoints needing evaluation: {missing}")
    reports = {int(k): pipeline.DeploymentReport.from_dict(v) for k, v in json.loads(dep.read_text()).items()}
    try:
        bundle = pipeline.correlation_report(runlog, reports)
    except KeyError as exc:
        raise CliError("missing_evaluations", str(exc.args[0])) from exc
    out = run_dir / "report"
    _prepare_out(out, args.fresh)
    _write_json(out / "report.json", bundle)
    write_table1(out / "table1.csv", bundle, reports)
    for kind in metrics.METRIC_KINDS:
        write_fig3(out / f"fig3_{kind}.csv", runlog, kind, cfg.spline.smoothing)
    write_fig4(out / "fig4.csv", reports, cfg.env.max_actions)
    return EXIT_OK


def write_table1(path: Path, bundle: dict, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "iteration", "improvement_ratio", "final_coverage", "final_coverage_se", "actions", "notice"])
        fired = [r for r in bundle["criteria"] if r["fired_iteration"] is not None]
        for r in fired:
            rep = reports[r["fired_iteration"]]
            w.writerow([r["criterion"], r["fired_iteration"], repr(rep.improvement_ratio), repr(rep.mean_final), repr(rep.se_final), repr(rep.mean_actions), ""])
        rep = reports[bundle["final_iteration"]]
        notice = "" if fired else "no criterion fired"
        w.writerow([f"final_{bundle['final_iteration']}", bundle["final_iteration"], repr(rep.improvement_ratio), repr(rep.mean_final), repr(rep.se_final), repr(rep.mean_actions), notice])


def write_fig3(path: Path, runlog: pipeline.RunLog, kind: str, lam: float) -> None:
    """Raw points, the full-history spline at each iteration, and the firing markers of this metric."""
    series = runlog.series(kind)
    smooth = [None] * len(series)
    if len(series) >= 4:
        fit = metrics.fit_spline(series, series.iterations[-1] + 1, lam)
        smooth = list(metrics.sample_spline(fit, series.iterations))
    marks = {}
    for c in runlog.criteria:
        d = runlog.first_fire.get(c["name"])
        if c["metric"] == kind and d is not None:
            marks.setdefault(d["iteration"], []).append(c["name"])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "value", "spline", "fired"])
        for i, v, s in zip(series.iterations, series.values, smooth):
            w.writerow([i, repr(v), "" if s is None else repr(float(s)), ";".join(marks.get(i, []))])


def write_fig4(path: Path, reports, max_actions: int) -> None:
    """Mean target coverage after each action, per checkpoint; finished episodes hold their last value."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "action", "mean_coverage", "se_coverage"])
        for it in sorted(reports):
            curves = np.array([(e.coverages + [e.coverages[-1]] * max_actions)[: max_actions + 1] for e in reports[it].episodes])
            n = len(curves)
            for a in range(max_actions + 1):
                col = curves[:, a]
                se = float(np.std(col, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
                w.writerow([it, a, repr(float(col.mean())), repr(se)])


def trajectory_records(tr: oracle.Trajectory) -> list[dict]:
    """Replay records {step, action[4], coverage, done_reason}, one per action."""
    recs = []
    for k, a in enumerate(tr.actions):
        done = tr.done_reason if k == len(tr.actions) - 1 else None
        recs.append({"seed": tr.seed, "step": k, "action": a.to_array().tolist(), "coverage": tr.coverages[k + 1], "done_reason": done})
    return recs


def cmd_demo_gen(args) -> int:
    cfg = _load_config(args.config, None)
    out = _prepare_out(_resolve_out(args.out), args.fresh)
    if args.count < 1 or args.shard_size < 1:
        raise CliError("invalid_arguments", "--count and --shard-size must be >= 1")
    demos = oracle.generate_demos(cfg.env, args.count, args.seed)
    shards = []
    for k in range(0, len(demos), args.shard_size):
        name = f"shard-{k // args.shard_size:04d}.jsonl"
        with open(out / name, "w") as fh:
            for tr in demos[k : k + args.shard_size]:
                steps = [{"obs": np.asarray(o).ravel().tolist(), "action": a.to_array().tolist()} for o, a in tr.pairs()]
                fh.write(json.dumps({"seed": tr.seed, "steps": steps, "coverages": tr.coverages, "done_reason": tr.done_reason}) + "\n")
        shards.append({"file": name, "episode_seeds": [t.seed for t in demos[k : k + args.shard_size]]})
    manifest = {
        "version": 1,
        "config_hash": config_hash(cfg.env),
        "seed": args.seed,
        "count": len(demos),
        "pairs": sum(len(t) for t in demos),
        "oracle_success_rate": float(np.mean([t.done_reason == cloth.DONE_TARGET for t in demos])),
        "shards": shards,
    }
    _write_json(out / "manifest.json", manifest)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="clothswitch", description="Sim-to-real switching criteria testbed.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the master seed")
    p.add_argument("--mode", choices=pipeline.MODES, default=pipeline.FULL_HORIZON)
    p.add_argument("--criterion", choices=[c[0] for c in stopping.CRITERIA], default=None,
                   help="criterion that ends a stop_at_first_fire run")
    p.add_argument("--calibration", default=None, help="calibration.json with tuned criteria")
    p.add_argument("--no-criteria", action="store_true", help="skip criteria (and the reference run)")
    p.add_argument("--fresh", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("calibrate", help="reference run on the tuning seed; writes calibration.json")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fresh", action="store_true")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("stop-scan", help="replay the criteria over a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--criteria", required=True, help="calibration.json or run.json")
    p.add_argument("--out", default=None, help="report path (default: stdout)")
    p.add_argument("--fresh", action="store_true")
    p.set_defaults(func=cmd_stop_scan)

    p = sub.add_parser("deploy-eval", help="evaluate every snapshot of a run on the target environment")
    p.add_argument("--run", required=True)
    p.add_argument("--fresh", action="store_true")
    p.set_defaults(func=cmd_deploy_eval)

    p = sub.add_parser("report", help="write table1/fig3/fig4 CSVs for an evaluated run")
    p.add_argument("--run", required=True)
    p.add_argument("--fresh", action="store_true")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("demo-gen", help="write oracle demonstrations as JSONL shards")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shard-size", type=int, default=50)
    p.add_argument("--fresh", action="store_true")
    p.set_defaults(func=cmd_demo_gen)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        err = {"error": exc.kind, "message": str(exc)}
        sys.stderr.write(json.dumps(err) + "\n")
        out = getattr(args, "out", None)
        if out and args.command in ("train", "calibrate", "demo-gen") and exc.kind != "refused_overwrite":
            d = _resolve_out(out)
            if d.is_dir():
                (d / "error.json").write_text(json.dumps(err, indent=2) + "\n")
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
