"""Command-line interface.

    plab run --config cfg.json --out DIR [--seed N]
    plab grid --config grid.json --out DIR
    plab verify
    plab aat --csv metrics.csv
    plab compare --in DIR [DIR ...] [--out FILE]
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from . import harness, verify
from .errors import ConfigError, PlabError
from .metrics import aat


def _read_acc_csv(path: str) -> list[float]:
    """Per-task accuracies out of a metric log (rows with metric == acc)."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"task", "metric", "value"} - set(reader.fieldnames or ())
        if missing:
            raise ConfigError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            if row["metric"] == "acc":
                rows.append((int(row["task"]), float(row["value"])))
    if not rows:
        raise ConfigError(f"{path}: no rows with metric == 'acc'")
    rows.sort()
    return [v for _, v in rows]


def _cmd_run(args) -> int:
    cfg = harness.load_config(args.config)
    seeds = (args.seed,) if args.seed is not None else None
    record = harness.run(cfg, out_dir=args.out, seeds=seeds)
    table = harness.compare([record])
    with open(os.path.join(args.out, "summary.csv"), "w") as fh:
        fh.write(table)
    print(table, end="")
    for rep in record.reports:
        if rep.diverged_at_task is not None:
            print(f"seed {rep.seed}: diverged at task {rep.diverged_at_task}")
    return 0


def _cmd_grid(args) -> int:
    with open(args.config) as fh:
        obj = json.load(fh)
    combos = harness.expand_grid(obj)
    records = []
    for label, cfg in combos:
        out_dir = os.path.join(args.out, label)
        records.append(harness.run(cfg, out_dir=out_dir, label=label))
    table = harness.compare(records)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "summary.csv"), "w") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def _cmd_verify(_args) -> int:
    return verify.run_all()


def _cmd_aat(args) -> int:
    value = aat(_read_acc_csv(args.csv))
    print(f"AAT {value!r}")
    return 0


def _cmd_compare(args) -> int:
    records = [harness.load_record(d) for d in args.dirs]
    table = harness.compare(records)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="plab", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run one experiment config over its seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="run a single seed instead of config.seeds")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("grid", help="expand alpha/beta/window/warmup lists and run each combo")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=_cmd_grid)

    p = sub.add_parser("verify", help="run the oracle suites; exit 0 iff all pass")
    p.set_defaults(fn=_cmd_verify)

    p = sub.add_parser("aat", help="recompute AAT from a logged accuracy CSV")
    p.add_argument("--csv", required=True)
    p.set_defaults(fn=_cmd_aat)

    p = sub.add_parser("compare", help="AAT table across finished run directories")
    p.add_argument("--in", dest="dirs", nargs="+", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except PlabError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
