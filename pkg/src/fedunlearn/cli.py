"""Command-line entry points.

    fedunlearn run CONFIG.toml [--out DIR] [--jobs N]
    fedunlearn sweep CONFIG.toml --axis AXIS --values V1,V2,... [--out DIR]
    fedunlearn table ROWS.csv --template {t1,t2,t3,t4,ablation} [--out FILE]
    fedunlearn verify-bound REPORT.json

Relative output directories resolve against $FEDUNLEARN_OUTPUT_ROOT when set.
Exit status is nonzero on configuration errors or failed invariants.
"""

from __future__ import annotations

import argparse
import json
import sys

from .config import ConfigError, load_config
from .harness import AXES, ablation_sweep, emit_table, read_rows, run_experiment


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.jobs:
        cfg = cfg.with_overrides(jobs=args.jobs)
    rows = run_experiment(cfg, out_dir=args.out)
    for row in rows:
        asr = "" if row.asr is None else f"  asr={row.asr:.4f}"
        bound = "" if row.bound_holds is None else f"  bound_holds={row.bound_holds}"
        print(f"seed={row.seed}  {row.method:<18} ter={row.ter:.4f}{asr}{bound}")
    if any(row.bound_holds is False for row in rows):
        print("recovery bound violated", file=sys.stderr)
        return 2
    return 0


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    values = [v for v in args.values.split(",") if v]
    plot_rows = ablation_sweep(cfg, args.axis, values, out_dir=args.out)
    for r in plot_rows:
        print(f"{r['axis']}={r['value']}  {r['method']:<18} ter={r['ter']}")
    return 0


def _cmd_table(args) -> int:
    rows = read_rows(args.rows)
    text, csv_text = emit_table(rows, args.template)
    print(text)
    if args.out:
        with open(args.out, "w") as f:
            f.write(csv_text)
        print(f"wrote {args.out}")
    return 0


def _cmd_verify_bound(args) -> int:
    with open(args.report) as f:
        doc = json.load(f)
    lhs = (doc.get("traces") or {}).get("distance")
    rhs = (doc.get("traces") or {}).get("bound")
    if not lhs or not rhs:
        print("report carries no bound traces (run with unlearn.verify_bound=true)",
              file=sys.stderr)
        return 2
    slack = 1e-9
    bad = [t for t, (a, b) in enumerate(zip(lhs, rhs)) if a > b + slack]
    for t in bad[:10]:
        print(f"round {t}: ||w - w_scratch|| = {lhs[t]:.6e} > bound {rhs[t]:.6e}")
    if bad:
        print(f"bound violated at {len(bad)} of {len(lhs)} rounds")
        return 1
    print(f"bound holds at all {len(lhs)} rounds "
          f"(max slack use {max(a / b if b else 0.0 for a, b in zip(lhs, rhs)):.3f})")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="fedunlearn",
                                     description="Poisoning-robust federated "
                                                 "unlearning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--jobs", type=int, help="parallel seed cells")
    p.set_defaults(fn=_cmd_run)

    p = sub.add_parser("sweep", help="ablation sweep over one axis")
    p.add_argument("config")
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", help="output directory (overrides config)")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("table", help="render a results grid")
    p.add_argument("rows", help="results.csv or sweep CSV")
    p.add_argument("--template", required=True,
                   choices=["t1", "t2", "t3", "t4", "ablation"])
    p.add_argument("--out", help="also write the grid as CSV")
    p.set_defaults(fn=_cmd_table)

    p = sub.add_parser("verify-bound", help="re-check a report's recovery bound")
    p.add_argument("report")
    p.set_defaults(fn=_cmd_verify_bound)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
