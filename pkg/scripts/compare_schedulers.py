"""Train Standard, GU and FUN on the same shift task and print the comparison table.

    python3 scripts/compare_schedulers.py --config configs/default.toml --replicas 5 --out runs/compare
"""

import argparse
import logging
from pathlib import Path

from funfreeze.config import load_config
from funfreeze.runner import comparison_table, run_compare


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", default="configs/default.toml")
    ap.add_argument("--schedulers", nargs="+", default=["Standard", "GU", "FUN"])
    ap.add_argument("--replicas", type=int, default=5)
    ap.add_argument("--seed-base", type=int, default=0)
    ap.add_argument("--out", default="runs/compare")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    summaries = run_compare(load_config(args.config), Path(args.out), args.schedulers, args.replicas, args.seed_base)
    print(comparison_table(summaries))
    std = summaries[[s["scheduler"] for s in summaries].index("Standard")] if "Standard" in args.schedulers else None
    if std:
        for s in summaries:
            gap = 100 * (s["shifted_acc_mean"] - std["shifted_acc_mean"])
            print(f"{s['scheduler']:<10} shifted vs Standard: {gap:+.2f} points")


if __name__ == "__main__":
    main()
