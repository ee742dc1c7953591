"""Mean Tr(F) per trainable adapter over training, GU against Standard.

Writes one CSV with the replica-mean curve for each scheduler and prints the
first few probe points after step 0.

    python3 scripts/learning_dynamics.py --config configs/dynamics.toml --replicas 4
"""

import argparse
import csv
from pathlib import Path

import numpy as np

from funfreeze.config import load_config
from funfreeze.fisher import curve_stats, min_max_normalize, moving_average
from funfreeze.runner import build_task, replica_seeds, run_once
from funfreeze.schedule import SchedulerKind


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="configs/dynamics.toml")
    ap.add_argument("--schedulers", nargs="+", default=["GU", "Standard"])
    ap.add_argument("--replicas", type=int, default=4)
    ap.add_argument("--out", default="runs/dynamics/curves.csv")
    args = ap.parse_args()

    cfg = load_config(args.config)
    task = build_task(cfg)
    curves = {}
    for name in args.schedulers:
        runs = [dict(run_once(cfg, task, replica_seeds(cfg, 0, r), scheduler=SchedulerKind(name)).fisher_avg_series())
                for r in range(args.replicas)]
        steps = sorted(runs[0])
        curves[name] = [(s, float(np.mean([run[s] for run in runs]))) for s in steps]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scheduler", "step", "trace", "smoothed_normalized"])
        for name, series in curves.items():
            norm = min_max_normalize(moving_average(series, cfg.output.window))
            for (s, v), (_, nv) in zip(series, norm):
                w.writerow([name, s, repr(v), repr(nv)])

    steps = [s for s, _ in curves[args.schedulers[0]]][1:4]
    for s in steps:
        print(f"step {s:>5}: " + "  ".join(f"{n}={dict(c)[s]:.3e}" for n, c in curves.items()))
    for name, series in curves.items():
        cs = curve_stats(series, cfg.output.alpha)
        print(f"{name:<10} peak {cs.peak_value:.3e} at {cs.peak_step}, width {cs.width_steps} steps")


if __name__ == "__main__":
    main()
