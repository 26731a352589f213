"""The iterative behavior-cloning loop, its run log, and target-environment evaluation.

Each iteration collects K fresh oracle demonstrations, aggregates them, runs one
update epoch on the deployed policy, refreshes the uncertainty ensemble on its
cadence, records both switching metrics and feeds them to every criterion.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import cloth, learner, metrics, oracle, stopping
from .config import RunConfig, config_hash, to_dict
from .metrics import SIM_REWARD, UNCERTAINTY, CrossValRecord, HoldoutSet, MetricSeries

log = logging.getLogger(__name__)

FULL_HORIZON = "full_horizon"
STOP_AT_FIRST_FIRE = "stop_at_first_fire"
MODES = (FULL_HORIZON, STOP_AT_FIRST_FIRE)
RUNLOG_VERSION = 1

# stream tags for derived seeds
_INIT, _DEMO, _UPDATE, _ENSEMBLE, _EVAL, _DEPLOY = range(1, 7)


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def eval_seeds(cfg: RunConfig, iteration: int) -> list[int]:
    """Source-env rollout seeds for the reward metric; shared by every master seed."""
    return metrics.rollout_seeds(cfg.L, derive_seed(cfg.eval_seed, _EVAL, iteration))


def deployment_seeds(cfg: RunConfig) -> list[int]:
    """Common target-env start seeds for every snapshot of every run."""
    return metrics.rollout_seeds(cfg.deploy_episodes, derive_seed(cfg.eval_seed, _DEPLOY))


def checkpoint_iterations(N: int) -> list[int]:
    return sorted({max(1, math.ceil(k * N / 10)) for k in range(1, 11)})


def snapshot_id(cfg_hash: str, iteration: int) -> str:
    return f"{cfg_hash}-i{iteration:04d}"


class TrainingFailure(RuntimeError):
    def __init__(self, message: str, runlog: "RunLog"):
        super().__init__(message)
        self.runlog = runlog


@dataclass
class IterationRecord:
    iteration: int
    dataset_size: int
    demo_steps: int
    bc_loss: float
    sim_reward: float
    epistemic_uncertainty: float
    ensemble_refreshed: bool
    decisions: dict[str, dict] = field(default_factory=dict)


@dataclass
class RunLog:
    config_hash: str
    seed: int
    N: int
    mode: str
    criteria: list[dict] = field(default_factory=list)
    records: list[IterationRecord] = field(default_factory=list)
    first_fire: dict[str, dict | None] = field(default_factory=dict)
    checkpoints: dict[int, str] = field(default_factory=dict)
    failure: dict | None = None
    snapshots: dict[int, learner.PolicyNet] = field(default_factory=dict, repr=False, compare=False)

    def series(self, kind: str) -> MetricSeries:
        return MetricSeries(kind, [r.iteration for r in self.records], [getattr(r, kind) for r in self.records])

    def fired_iterations(self) -> dict[str, int | None]:
        return {k: (None if d is None else d["iteration"]) for k, d in self.first_fire.items()}

    def summary(self) -> dict:
        return {
            "version": RUNLOG_VERSION,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "N": self.N,
            "mode": self.mode,
            "iterations_run": len(self.records),
            "criteria": self.criteria,
            "first_fire": self.first_fire,
            "checkpoints": {str(k): v for k, v in sorted(self.checkpoints.items())},
            "failure": self.failure,
        }

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "runlog.jsonl", "w") as fh:
            for r in self.records:
                fh.write(json.dumps(asdict(r), sort_keys=True) + "\n")
        (out / "run.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")
        (out / "metrics.csv").write_text(metrics_csv(self))

    @classmethod
    def read(cls, run_dir: str | Path) -> "RunLog":
        run_dir = Path(run_dir)
        head = json.loads((run_dir / "run.json").read_text())
        if head.get("version") != RUNLOG_VERSION:
            raise ValueError(f"unsupported run log version {head.get('version')!r}")
        records = [IterationRecord(**json.loads(line)) for line in (run_dir / "runlog.jsonl").read_text().splitlines() if line]
        return cls(
            head["config_hash"], head["seed"], head["N"], head["mode"], head["criteria"], records,
            head["first_fire"], {int(k): v for k, v in head["checkpoints"].items()}, head["failure"],
        )


# ---------------------------------------------------------------------------
# metric CSV


CSV_HEADER = ("iteration", "kind", "value")


def metrics_csv(runlog: RunLog) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in runlog.records:
        w.writerow([r.iteration, SIM_REWARD, repr(float(r.sim_reward))])
        w.writerow([r.iteration, UNCERTAINTY, repr(float(r.epistemic_uncertainty))])
    return buf.getvalue()


class CsvFormatError(ValueError):
    pass


def read_metrics_csv(path: str | Path) -> dict[str, MetricSeries]:
    """Parse an `iteration,kind,value` file; errors name the offending line."""
    series = {k: MetricSeries(k) for k in metrics.METRIC_KINDS}
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(c.strip() for c in rows[0]) != CSV_HEADER:
        raise CsvFormatError(f"line 1: expected header {','.join(CSV_HEADER)}")
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 3:
            raise CsvFormatError(f"line {lineno}: expected 3 fields, got {len(row)}")
        it, kind, value = (c.strip() for c in row)
        if kind not in series:
            raise CsvFormatError(f"line {lineno}: unknown metric kind {kind!r}")
        try:
            i, v = int(it), float(value)
        except ValueError:
            raise CsvFormatError(f"line {lineno}: cannot parse iteration/value {it!r}, {value!r}") from None
        s = series[kind]
        if s.iterations and i <= s.iterations[-1]:
            raise CsvFormatError(f"line {lineno}: iteration {i} of {kind} does not follow {s.iterations[-1]}")
        if not math.isfinite(v):
            raise CsvFormatError(f"line {lineno}: non-finite value")
        s.append(i, v)
    return series


# ---------------------------------------------------------------------------
# training


def make_holdout(cfg: RunConfig) -> tuple[HoldoutSet, list[int]]:
    demos = oracle.generate_demos(cfg.env, cfg.holdout_episodes, cfg.holdout_seed)
    return HoldoutSet.from_trajectories(demos), [d.seed for d in demos]


def run_training(
    cfg: RunConfig,
    mode: str = FULL_HORIZON,
    criteria: list[stopping.Criterion] | None = None,
    designated: str | None = None,
    out_dir: str | Path | None = None,
) -> RunLog:
    """Run the loop for up to N iterations.

    `criteria` are updated every iteration and latch their first firing.  In
    stop_at_first_fire mode the loop ends when `designated` fires.  When `out_dir`
    is given the log and snapshots are written there, also on failure.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    criteria = [c.reset() for c in (criteria or [])]
    names = [c.name for c in criteria]
    if mode == STOP_AT_FIRST_FIRE and designated not in names:
        raise ValueError(f"stop_at_first_fire needs a designated criterion among {names}")
    h = config_hash(cfg)
    runlog = RunLog(h, cfg.seed, cfg.N, mode, [c.params() for c in criteria], first_fire={n: None for n in names})
    snap_dir = None if out_dir is None else Path(out_dir) / "snapshots"
    if snap_dir is not None:
        snap_dir.mkdir(parents=True, exist_ok=True)

    holdout, holdout_seeds = make_holdout(cfg)
    data = learner.Dataset()
    policy = learner.init_policy(cfg.env.obs_size**2, cfg.net, derive_seed(cfg.seed, _INIT))
    ensemble = None
    used_seeds = set(holdout_seeds)
    keep = set(checkpoint_iterations(cfg.N))
    t0 = time.time()
    try:
        for i in range(1, cfg.N + 1):
            demos = oracle.generate_demos(cfg.env, cfg.K, derive_seed(cfg.seed, _DEMO, i), exclude=used_seeds)
            used_seeds.update(d.seed for d in demos)
            data.add_trajectories(demos, i)
            policy = learner.update_epoch(policy, data, cfg.optimizer, derive_seed(cfg.seed, _UPDATE, i))
            refreshed = ensemble is None or (i - 1) % cfg.ensemble_refresh == 0
            if refreshed:
                seeds = [derive_seed(cfg.seed, _ENSEMBLE, i, e) for e in range(cfg.E)]
                ensemble = learner.train_ensemble(data, cfg.optimizer, cfg.E, seeds, cfg.net, cfg.ensemble_steps)
            rec = IterationRecord(
                iteration=i,
                dataset_size=len(data),
                demo_steps=sum(len(d) for d in demos),
                bc_loss=learner.bc_loss_arrays(policy, data.X, data.Y),
                sim_reward=_sim_reward(policy, cfg, i),
                epistemic_uncertainty=metrics.epistemic_uncertainty(ensemble, holdout),
                ensemble_refreshed=refreshed,
            )
            runlog.records.append(rec)
            fired_now = []
            for c in criteria:
                d = c.update(runlog.series(c.metric))
                rec.decisions[c.name] = d.to_dict()
                if d.fired and runlog.first_fire[c.name] is None:
                    runlog.first_fire[c.name] = d.to_dict()
                    fired_now.append(c.name)
            if i in keep or fired_now:
                _snapshot(runlog, policy, i, snap_dir)
            log.info(
                "iter %d/%d |D|=%d loss=%.4f reward=%.3f unc=%.5f fired=%s (%.0fs)",
                i, cfg.N, len(data), rec.bc_loss, rec.sim_reward, rec.epistemic_uncertainty, fired_now, time.time() - t0,
            )
            if mode == STOP_AT_FIRST_FIRE and designated in fired_now:
                break
    except (learner.DivergenceError, FloatingPointError) as exc:
        runlog.failure = {"error": type(exc).__name__, "iteration": len(runlog.records) + 1, "message": str(exc)}
        if out_dir is not None:
            runlog.write(out_dir)
        raise TrainingFailure(str(exc), runlog) from exc
    if out_dir is not None:
        runlog.write(out_dir)
    return runlog


def _sim_reward(policy, cfg: RunConfig, iteration: int) -> float:
    eps = metrics.evaluate_episodes(policy, cfg.env, eval_seeds(cfg, iteration))
    return float(np.mean([t.final_coverage for t in eps]))


def _snapshot(runlog: RunLog, policy, iteration: int, snap_dir: Path | None) -> None:
    sid = snapshot_id(runlog.config_hash, iteration)
    runlog.checkpoints[iteration] = sid
    runlog.snapshots[iteration] = policy.copy()
    if snap_dir is not None:
        learner.save_policy(policy, snap_dir / f"{sid}.json", runlog.config_hash)


def load_snapshot(run_dir: str | Path, runlog: RunLog, iteration: int) -> learner.PolicyNet:
    if iteration in runlog.snapshots:
        return runlog.snapshots[iteration]
    sid = runlog.checkpoints.get(iteration)
    path = None if sid is None else Path(run_dir) / "snapshots" / f"{sid}.json"
    if path is None or not path.is_file():
        raise FileNotFoundError(f"no snapshot for iteration {iteration} in {run_dir}")
    return learner.load_policy(path)


# ---------------------------------------------------------------------------
# calibration


def calibrate(cfg: RunConfig, out_dir: str | Path | None = None) -> tuple[CrossValRecord, list[stopping.Criterion]]:
    """Reference run on the tuning seed; its curves set every criterion's thresholds."""
    ref = run_training(replace(cfg, seed=cfg.tuning_seed), FULL_HORIZON, out_dir=out_dir)
    record = CrossValRecord(
        ref.series(SIM_REWARD), ref.series(UNCERTAINTY), [eval_seeds(cfg, r.iteration) for r in ref.records]
    )
    return record, stopping.make_criteria(record, cfg.stopping, cfg.spline)


def calibration_to_dict(cfg: RunConfig, record: CrossValRecord, criteria) -> dict:
    return {
        "version": RUNLOG_VERSION,
        "tuning_key": tuning_key(cfg),
        "tuning_seed": cfg.tuning_seed,
        "reference": {
            SIM_REWARD: {"iterations": record.reward.iterations, "values": record.reward.values},
            UNCERTAINTY: {"iterations": record.uncertainty.iterations, "values": record.uncertainty.values},
        },
        "criteria": [c.params() for c in criteria],
    }


def calibration_from_dict(d: dict) -> tuple[CrossValRecord, list[stopping.Criterion]]:
    ref = d["reference"]
    record = CrossValRecord(
        MetricSeries(SIM_REWARD, ref[SIM_REWARD]["iterations"], ref[SIM_REWARD]["values"]),
        MetricSeries(UNCERTAINTY, ref[UNCERTAINTY]["iterations"], ref[UNCERTAINTY]["values"]),
    )
    return record, [stopping.criterion_from_params(c) for c in d["criteria"]]


def tuning_key(cfg: RunConfig) -> str:
    """Hash of everything the reference run depends on (the master seed excluded)."""
    return config_hash(replace(cfg, seed=0))


# ---------------------------------------------------------------------------
# deployment


@dataclass
class EpisodeReport:
    seed: int
    initial_coverage: float
    final_coverage: float
    actions_used: int
    done_reason: str | None
    coverages: list[float]


@dataclass
class DeploymentReport:
    iteration: int | None
    episodes: list[EpisodeReport]

    @property
    def mean_initial(self) -> float:
        return float(np.mean([e.initial_coverage for e in self.episodes]))

    @property
    def mean_final(self) -> float:
        return float(np.mean([e.final_coverage for e in self.episodes]))

    @property
    def se_final(self) -> float:
        v = [e.final_coverage for e in self.episodes]
        return float(np.std(v, ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0

    @property
    def improvement_ratio(self) -> float:
        return self.mean_final / self.mean_initial

    @property
    def mean_actions(self) -> float:
        return float(np.mean([e.actions_used for e in self.episodes]))

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "episodes": [asdict(e) for e in self.episodes],
            "mean_initial": self.mean_initial,
            "mean_final": self.mean_final,
            "se_final": self.se_final,
            "improvement_ratio": self.improvement_ratio,
            "mean_actions": self.mean_actions,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeploymentReport":
        return cls(d["iteration"], [EpisodeReport(**e) for e in d["episodes"]])


def evaluate_deployment(snapshot, target_cfg, episodes: int, seeds, iteration: int | None = None) -> DeploymentReport:
    """Roll a snapshot out on the target environment from the given start seeds."""
    if snapshot is None:
        raise FileNotFoundError("missing snapshot")
    seeds = [int(s) for s in seeds][:episodes]
    if len(seeds) < episodes:
        raise ValueError(f"need {episodes} seeds, got {len(seeds)}")
    out = []
    for t in metrics.evaluate_episodes(snapshot, target_cfg, seeds):
        out.append(EpisodeReport(t.seed, t.initial_coverage, t.final_coverage, len(t), t.done_reason, list(t.coverages)))
    return DeploymentReport(iteration, out)


def deploy_checkpoints(cfg: RunConfig, runlog: RunLog, run_dir: str | Path | None = None) -> dict[int, DeploymentReport]:
    target = cloth.make_target_env(cfg.env, cfg.shift)
    seeds = deployment_seeds(cfg)
    reports = {}
    for it in sorted(runlog.checkpoints):
        pol = load_snapshot(run_dir, runlog, it) if run_dir is not None else runlog.snapshots[it]
        reports[it] = evaluate_deployment(pol, target, cfg.deploy_episodes, seeds, it)
    return reports


def correlation_report(runlog: RunLog, reports: dict[int, DeploymentReport]) -> dict:
    """Per-criterion budget use and target-env competitiveness, plus sim/target rank correlation."""
    N = runlog.N
    final_it = runlog.records[-1].iteration if runlog.records else N
    needed = {final_it} | {d["iteration"] for d in runlog.first_fire.values() if d is not None}
    missing = sorted(needed - set(reports))
    if missing:
        raise KeyError(f"missing deployment evaluations for iterations {missing}")
    final = reports[final_it]
    rows = []
    for name, d in runlog.first_fire.items():
        if d is None:
            rows.append({"criterion": name, "fired_iteration": None, "reason": stopping.NOT_FIRED})
            continue
        rep = reports[d["iteration"]]
        rows.append({
            "criterion": name,
            "fired_iteration": d["iteration"],
            "reason": d["reason"],
            "budget_fraction": d["iteration"] / N,
            "target_final_coverage": rep.mean_final,
            "target_se": rep.se_final,
            "gap_to_final": rep.mean_final - final.mean_final,
        })
    by_it = {r.iteration: r.sim_reward for r in runlog.records}
    its = [i for i in sorted(reports) if i in by_it]
    rho = None
    if len(its) >= 3:
        sim = [by_it[i] for i in its]
        tgt = [reports[i].mean_final for i in its]
        if np.ptp(sim) > 0 and np.ptp(tgt) > 0:
            rho = float(spearmanr(sim, tgt).statistic)
    return {
        "N": N,
        "final_iteration": final_it,
        "final_target_coverage": final.mean_final,
        "final_target_se": final.se_final,
        "criteria": rows,
        "checkpoints": [{"iteration": i, "sim_reward": by_it.get(i), "target_final_coverage": reports[i].mean_final} for i in sorted(reports)],
        "spearman_sim_vs_target": rho,
    }


def run_config_summary(cfg: RunConfig) -> dict:
    return {"config_hash": config_hash(cfg), "config": to_dict(cfg)}
