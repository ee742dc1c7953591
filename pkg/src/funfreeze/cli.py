"""Command-line entry point.

    funfreeze train --config configs/default.toml --replicas 4
    funfreeze sweep-schedules --config configs/default.toml --n-schedules 9
    funfreeze fisher-probe --checkpoint run/replica_0/checkpoint_final.jsonl \\
        --data run/data/train.jsonl --estimator exact
    funfreeze report run/replica_0

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Output root precedence: ``--out``, then ``$FUNFREEZE_OUT``, then ``[output] directory``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from funfreeze.config import load_config
from funfreeze.errors import ConfigError, ParseError, TrainingError
from funfreeze.fisher import ESTIMATORS
from funfreeze.schedule import resolve

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _diagnose("usage", message)
        raise SystemExit(EXIT_USAGE)


def _diagnose(kind: str, message: str) -> None:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)


def _out_root(args, cfg) -> Path:
    if args.out:
        return Path(args.out)
    env = os.environ.get("FUNFREEZE_OUT")
    if env:
        return Path(env)
    return Path(cfg.output.directory)


def cmd_train(args) -> int:
    from funfreeze.runner import run_train, summary_line

    cfg = load_config(args.config)
    cfg.validate()
    if args.dry_run:
        kind = cfg.scheduler_kind()
        tcfg = cfg.train_config()
        if kind.tag == "FUN":
            print("FUN selects layers from Fisher probes during training; no schedule to resolve ahead of time")
            return EXIT_OK
        print(f"scheduler={kind.label} L={cfg.model.layers} k={tcfg.k} N={tcfg.steps}")
        for e in resolve(kind, cfg.model.layers, tcfg.k, tcfg.steps):
            print(f"step {e.step}: unfreeze {list(e.layers)}")
        return EXIT_OK
    summary = run_train(cfg, _out_root(args, cfg), replicas=args.replicas, seed_base=args.seed_base)
    print(summary_line(summary))
    return EXIT_OK


def cmd_sweep(args) -> int:
    from funfreeze.runner import run_sweep

    cfg = load_config(args.config)
    rows = run_sweep(cfg, _out_root(args, cfg), args.n_schedules, args.seed_base, args.replicas)
    for r in rows:
        print(
            f"[{r['schedule_id']:02d}] {r['permutation']:<24} shifted={100 * r['shifted_acc']:.2f} "
            f"peak={r['peak_value']:.3e}@{r['peak_step']} width={r['width_steps']} group={r['group']}"
        )
    return EXIT_OK


def cmd_fisher_probe(args) -> int:
    from funfreeze.runner import format_report, run_fisher_probe

    for p in (args.checkpoint, args.data):
        if not Path(p).exists():
            _diagnose("missing_file", f"{p} does not exist")
            return EXIT_USAGE
    out = Path(args.out) if args.out else Path(os.environ.get("FUNFREEZE_OUT", ".")) / "fisher_probe.csv"
    report = run_fisher_probe(
        Path(args.checkpoint), Path(args.data), out, args.estimator, args.n_batches, args.batch_size, args.seed
    )
    print(format_report(report))
    return EXIT_OK


def cmd_report(args) -> int:
    from funfreeze.runner import run_report

    run_dir = Path(args.run_dir)
    for name in ("metrics.csv", "fisher.csv"):
        if not (run_dir / name).exists():
            _diagnose("missing_file", f"{run_dir / name} does not exist")
            return EXIT_USAGE
    stats = run_report(run_dir, Path(args.out) if args.out else None, args.window, args.alpha)
    print(", ".join(f"{k}={v}" for k, v in stats.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="funfreeze", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="replicated training runs for one scheduler")
    p.add_argument("--config", required=True)
    p.add_argument("--replicas", type=int, default=4)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--out")
    p.add_argument("--dry-run", action="store_true", help="print the resolved unfreeze schedule and exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep-schedules", help="random constrained schedules plus top-down")
    p.add_argument("--config", required=True)
    p.add_argument("--n-schedules", type=int, default=9)
    p.add_argument("--replicas", type=int, default=1)
    p.add_argument("--seed-base", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fisher-probe", help="one Fisher trace measurement on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--estimator", choices=ESTIMATORS, default="batch_square")
    p.add_argument("--n-batches", type=int, default=40)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fisher_probe)

    p = sub.add_parser("report", help="plot-ready curves for one run directory")
    p.add_argument("run_dir")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ParseError, FileNotFoundError) as e:
        _diagnose(type(e).__name__, str(e))
        return EXIT_USAGE
    except TrainingError as e:
        _diagnose(type(e).__name__, str(e))
        return EXIT_RUNTIME
    except Exception as e:  # noqa: BLE001
        _diagnose(type(e).__name__, str(e))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
