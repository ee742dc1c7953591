"""Experiment drivers behind the CLI: replicated training, schedule sweeps,
standalone Fisher probes and plot-data reports."""

from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from funfreeze.config import ExperimentConfig, dump_config, with_overrides
from funfreeze.data import ShiftTask, aux_dataset, generate, load_dataset, save_dataset
from funfreeze.errors import ConfigError
from funfreeze.fisher import (
    FisherProbeConfig,
    FisherReport,
    curve_stats,
    min_max_normalize,
    moving_average,
    probe_batches,
    read_fisher_csv,
    trace_probe,
    write_fisher_csv,
)
from funfreeze.model import FreezeMask, init_stack, load_checkpoint, pretrain_base, save_checkpoint
from funfreeze.schedule import SchedulerKind, sample_constrained_permutation, write_schedule_log
from funfreeze.train import RunMetrics, Seeds, read_metrics_csv, train, write_metrics_csv

log = logging.getLogger(__name__)


def build_task(cfg: ExperimentConfig) -> ShiftTask:
    if not cfg.data.path:
        return generate(cfg.data.spec)
    root = Path(cfg.data.path)
    train_ds, header = load_dataset(root / "train.jsonl")
    val_ds, _ = load_dataset(root / "val.jsonl")
    test = {}
    for p in sorted(root.glob("test_*.jsonl")):
        test[p.stem[len("test_") :]] = load_dataset(p)[0]
    if header["h"] != cfg.model.hidden:
        raise ConfigError(f"dataset width {header['h']} != model hidden {cfg.model.hidden}")
    return ShiftTask(cfg.data.spec, train_ds, val_ds, test, [], np.zeros((0, header["h"])))


def build_stack(cfg: ExperimentConfig, task: ShiftTask, seeds: Seeds):
    m = cfg.model
    stack = init_stack(m.hidden, m.layers, m.classes, m.reduction_factor, seeds.init, m.identity_init)
    if m.pretrain_steps:
        aux = aux_dataset(task, m.aux_examples, m.aux_classes, seed=seeds.init)
        stack, _ = pretrain_base(stack, aux.features, aux.labels, m.pretrain_steps, lr=m.pretrain_lr, seed=seeds.init)
    return stack


def replica_seeds(cfg: ExperimentConfig, seed_base: int, replica: int) -> Seeds:
    return cfg.seeds.offset(seed_base + replica)


def run_once(
    cfg: ExperimentConfig,
    task: ShiftTask,
    seeds: Seeds,
    out_dir: Path | None = None,
    scheduler: SchedulerKind | None = None,
) -> RunMetrics:
    stack = build_stack(cfg, task, seeds)
    tcfg = cfg.train_config(seeds, scheduler)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(stack, out_dir / "checkpoint_init.jsonl", FreezeMask.all_frozen(stack.n_layers))
    stack, metrics = train(stack, task, tcfg, checkpoint_dir=out_dir)
    if out_dir is not None:
        write_metrics_csv(metrics, out_dir / "metrics.csv")
        write_fisher_csv(metrics.fisher, out_dir / "fisher.csv")
        write_schedule_log(metrics.events, tcfg.scheduler.label, out_dir / "schedule.jsonl")
        mask = FreezeMask([any(j in e.layers for e in metrics.events) for j in range(stack.n_layers)])
        save_checkpoint(stack, out_dir / "checkpoint_final.jsonl", mask, {"step": tcfg.steps})
        (out_dir / "final.json").write_text(json.dumps(metrics.final, sort_keys=True, indent=1) + "\n")
    return metrics


def write_task(task: ShiftTask, root: Path) -> None:
    root.mkdir(parents=True, exist_ok=True)
    h, C, digest = task.spec.h, task.spec.C, task.spec.digest()
    save_dataset(task.train, root / "train.jsonl", h, C, digest)
    save_dataset(task.val, root / "val.jsonl", h, C, digest)
    for name, ds in task.test.items():
        save_dataset(ds, root / f"test_{name}.jsonl", h, C, digest)


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0.0 for a single value)."""
    values = list(values)
    if len(values) < 2:
        return float(values[0]), 0.0
    return statistics.fmean(values), statistics.stdev(values)


@dataclass
class ReplicaRow:
    replica: int
    scheduler: str
    source_acc: float
    shifted_mean: float
    lowest: float
    val: float

    @classmethod
    def from_metrics(cls, replica: int, scheduler: str, m: RunMetrics) -> ReplicaRow:
        return cls(replica, scheduler, m.source_acc, m.shifted_mean, m.lowest, m.final["val"])


SUMMARY_FIELDS = [
    "scheduler",
    "n_replicas",
    "source_acc_mean",
    "source_acc_std",
    "shifted_acc_mean",
    "shifted_acc_std",
    "lowest_acc_mean",
    "lowest_acc_std",
]


def summarize(rows: list[ReplicaRow]) -> dict:
    src = mean_std(r.source_acc for r in rows)
    sh = mean_std(r.shifted_mean for r in rows)
    low = mean_std(r.lowest for r in rows)
    return dict(
        zip(
            SUMMARY_FIELDS,
            [rows[0].scheduler, len(rows), src[0], src[1], sh[0], sh[1], low[0], low[1]],
        )
    )


def summary_line(s: dict) -> str:
    pct = lambda m, sd: f"{100 * m:.2f}±{100 * sd:.2f}"  # noqa: E731
    return (
        f"scheduler={s['scheduler']}, source_acc={pct(s['source_acc_mean'], s['source_acc_std'])}, "
        f"shifted_acc={pct(s['shifted_acc_mean'], s['shifted_acc_std'])}, "
        f"lowest_acc={pct(s['lowest_acc_mean'], s['lowest_acc_std'])}"
    )


def _write_rows(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_summary(summaries: list[dict], path: Path) -> None:
    _write_rows(path, SUMMARY_FIELDS, [[s[k] for k in SUMMARY_FIELDS] for s in summaries])


def write_replicas(rows: list[ReplicaRow], path: Path) -> None:
    header = ["replica", "scheduler", "source_acc", "shifted_mean", "lowest", "val"]
    _write_rows(path, header, [[getattr(r, k) for k in header] for r in rows])


def run_train(cfg: ExperimentConfig, out: Path, replicas: int = 4, seed_base: int = 0) -> dict:
    cfg.validate()
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))
    task = build_task(cfg)
    if cfg.output.write_data and not cfg.data.path:
        write_task(task, out / "data")
    label = cfg.scheduler_kind().label
    rows = []
    for r in range(replicas):
        seeds = replica_seeds(cfg, seed_base, r)
        log.info("replica %d/%d (%s)", r + 1, replicas, label)
        metrics = run_once(cfg, task, seeds, out / f"replica_{r}")
        rows.append(ReplicaRow.from_metrics(r, label, metrics))
    write_replicas(rows, out / "replicas.csv")
    summary = summarize(rows)
    write_summary([summary], out / "summary.csv")
    return summary


def group_runs(scores: list[float], delta: float = 1.0) -> list[int]:
    """Greedy grouping of runs whose scores lie within ``delta`` of a group leader.

    Repeatedly take the best ungrouped score and group every ungrouped run
    within ``delta`` below it. Returns one group id per run (0 = best group).
    """
    groups = [-1] * len(scores)
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    gid = 0
    for i in order:
        if groups[i] != -1:
            continue
        for j in order:
            if groups[j] == -1 and scores[i] - scores[j] <= delta:
                groups[j] = gid
        gid += 1
    return groups


def spearman(x, y) -> float:
    # undefined for fewer than two points or a constant series
    if len(x) < 2 or len(set(x)) < 2 or len(set(y)) < 2:
        return math.nan
    return float(stats.spearmanr(x, y).statistic)


SWEEP_FIELDS = [
    "schedule_id",
    "permutation",
    "source_acc",
    "shifted_acc",
    "peak_value",
    "peak_step",
    "width_steps",
    "group",
]


def run_sweep(cfg: ExperimentConfig, out: Path, n_schedules: int = 9, seed_base: int = 0, replicas: int = 1) -> list[dict]:
    """Sampled constrained permutations plus the top-down order as the last schedule."""
    if n_schedules < 1:
        raise ConfigError("n_schedules must be >= 1")
    cfg.validate()
    L = cfg.model.layers
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(dump_config(cfg))
    task = build_task(cfg)
    rng = np.random.default_rng(cfg.seeds.scheduler + seed_base)
    perms = [sample_constrained_permutation(L, rng) for _ in range(n_schedules)]
    perms.append(list(range(L - 1, -1, -1)))

    rows = []
    for sid, perm in enumerate(perms):
        kind = SchedulerKind.fixed(perm)
        series_runs, accs, srcs = [], [], []
        for r in range(replicas):
            run_dir = out / f"schedule_{sid:02d}" / f"replica_{r}"
            m = run_once(cfg, task, replica_seeds(cfg, seed_base, r), run_dir, scheduler=kind)
            series_runs.append(m.fisher_avg_series())
            accs.append(m.shifted_mean)
            srcs.append(m.source_acc)
        steps = [s for s, _ in series_runs[0]]
        series = [(s, statistics.fmean(run[i][1] for run in series_runs)) for i, s in enumerate(steps)]
        cs = curve_stats(series, cfg.output.alpha)
        rows.append(
            {
                "schedule_id": sid,
                "permutation": " ".join(map(str, perm)),
                "source_acc": statistics.fmean(srcs),
                "shifted_acc": statistics.fmean(accs),
                "peak_value": cs.peak_value,
                "peak_step": cs.peak_step,
                "width_steps": cs.width_steps,
            }
        )
    groups = group_runs([100 * r["shifted_acc"] for r in rows], delta=1.0)
    for r, g in zip(rows, groups):
        r["group"] = g
    _write_rows(out / "sweep.csv", SWEEP_FIELDS, [[r[k] for k in SWEEP_FIELDS] for r in rows])
    acc = [r["shifted_acc"] for r in rows]
    corr = [
        ["peak_value", spearman([r["peak_value"] for r in rows], acc), len(rows)],
        ["width_steps", spearman([r["width_steps"] for r in rows], acc), len(rows)],
    ]
    _write_rows(out / "correlation.csv", ["metric", "spearman_rho", "n"], corr)
    return rows


def run_fisher_probe(
    checkpoint: Path,
    data: Path,
    out: Path,
    estimator: str = "batch_square",
    n_batches: int = 40,
    batch_size: int = 32,
    seed: int = 0,
) -> FisherReport:
    stack, mask, meta = load_checkpoint(checkpoint)
    ds, _ = load_dataset(data)
    if mask is None:
        mask = FreezeMask([True] * stack.n_layers)
    cfg = FisherProbeConfig(n_batches=n_batches, batch_size=batch_size, estimator=estimator, seed=seed)
    rng = np.random.default_rng(seed)
    report = trace_probe(stack, probe_batches(ds.features, batch_size, rng), cfg, mask, step=meta.get("step", 0), rng=rng)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_fisher_csv([report], out)
    return report


def format_report(report: FisherReport) -> str:
    lines = [f"Tr(F) at step {report.step} ({report.estimator}, {report.n_batches_used} batches)"]
    lines.append(f"{'layer':>6}  {'trace':>14}")
    for j, t in sorted(report.per_layer_trace.items(), reverse=True):
        lines.append(f"{j:>6}  {t:>14.6e}")
    lines.append(f"{'head':>6}  {report.head_trace:>14.6e}")
    lines.append(f"{'avg':>6}  {report.avg_per_trainable_adapter:>14.6e}")
    return "\n".join(lines)


def run_report(run_dir: Path, out: Path | None = None, window: int = 5, alpha: float = 0.5) -> dict:
    """Plot-ready curves: smoothed and min-max normalized Tr(F), validation accuracy, curve stats."""
    metrics_path, fisher_path = run_dir / "metrics.csv", run_dir / "fisher.csv"
    for p in (metrics_path, fisher_path):
        if not p.exists():
            raise FileNotFoundError(p)
    out = out or run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    reports = read_fisher_csv(fisher_path)
    raw = [(r.step, r.avg_per_trainable_adapter) for r in reports]
    smooth = moving_average(raw, window)
    norm = min_max_normalize(smooth)
    _write_rows(
        out / "fisher_curve.csv",
        ["step", "trace", "smoothed", "normalized"],
        [[s, v, sm, nv] for (s, v), (_, sm), (_, nv) in zip(raw, smooth, norm)],
    )
    val = [(int(r["step"]), float(r["value"])) for r in read_metrics_csv(metrics_path) if r["kind"] == "eval" and r["split"] == "val"]
    _write_rows(out / "validation_curve.csv", ["step", "accuracy"], [[s, v] for s, v in val])
    cs = curve_stats(raw, alpha)
    stats_row = {"peak_value": cs.peak_value, "peak_step": cs.peak_step, "width_steps": cs.width_steps, "alpha": cs.alpha, "window": window}
    _write_rows(out / "curve_stats.csv", list(stats_row), [list(stats_row.values())])
    return stats_row



def comparison_table(summaries: list[dict]) -> str:
    """Plain-text table: scheduler x {source, shifted mean, lowest domain}, mean ± sample std in points."""
    pct = lambda s, key: f"{100 * s[key + '_mean']:.2f} ± {100 * s[key + '_std']:.2f}"  # noqa: E731
    rows = [["scheduler", "n", "source", "shifted-mean", "lowest-domain"]]
    for s in summaries:
        rows.append([s["scheduler"], str(s["n_replicas"]), pct(s, "source_acc"), pct(s, "shifted_acc"), pct(s, "lowest_acc")])
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)


def run_compare(
    cfg: ExperimentConfig, out: Path, schedulers: list[str], replicas: int = 5, seed_base: int = 0
) -> list[dict]:
    """Train every scheduler on the same task and seeds; write comparison.csv and comparison.txt."""
    out.mkdir(parents=True, exist_ok=True)
    summaries = []
    for name in schedulers:
        sub = with_overrides(cfg, train={"scheduler": name}, output={"write_data": False})
        summaries.append(run_train(sub, out / name, replicas=replicas, seed_base=seed_base))
    write_summary(summaries, out / "comparison.csv")
    (out / "comparison.txt").write_text(comparison_table(summaries) + "\n")
    return summaries
