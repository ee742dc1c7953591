"""Random constrained unfreezing orders plus top-down, with Tr(F) curve statistics.

Thin wrapper over ``funfreeze sweep-schedules`` that also prints the rank
correlations between curve statistics and shifted-domain accuracy.

    python3 scripts/sweep_schedules.py --config configs/default.toml --n-schedules 9
"""

import argparse
import csv
import sys
from pathlib import Path

from funfreeze import cli


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="configs/default.toml")
    ap.add_argument("--n-schedules", type=int, default=9)
    ap.add_argument("--replicas", type=int, default=1)
    ap.add_argument("--out", default="runs/sweep")
    args = ap.parse_args()

    code = cli.main([
        "sweep-schedules", "--config", args.config, "--n-schedules", str(args.n_schedules),
        "--replicas", str(args.replicas), "--out", args.out,
    ])
    if code:
        sys.exit(code)
    with open(Path(args.out) / "correlation.csv") as fh:
        for row in csv.DictReader(fh):
            print(f"spearman({row['metric']}, shifted_acc) = {float(row['spearman_rho']):+.3f} over {row['n']} schedules")


if __name__ == "__main__":
    main()
