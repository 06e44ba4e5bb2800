"""Command-line entry point ``farswap-sim``."""

from __future__ import annotations

import argparse
import json
import sys
from contextlib import ExitStack

from .model import ConfigError, SimError, WorkloadConfig, load_config
from .scenario import Simulation, compare_reports, report_json, write_csvs
from .workloads import generate, write_trace


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg.seed = args.seed
    if args.duration_ns is not None:
        cfg.duration_ns = args.duration_ns
    with ExitStack() as stack:
        log = stack.enter_context(open(args.event_log, "w", encoding="utf-8")) if args.event_log else None
        trace = stack.enter_context(open(args.sched_trace, "w", encoding="utf-8")) if args.sched_trace else None
        try:
            report = Simulation(cfg, log, trace, check_order=args.check_order).run(args.wall_clock)
        except (SimError, AssertionError) as exc:
            print(f"simulation failed: {type(exc).__name__}: {exc}", file=sys.stderr)
            return 3
    text = report_json(report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.csv:
        write_csvs(report, args.csv)
    for v in report["invariant_violations"]:
        print(f"invariant violated: {v}", file=sys.stderr)
    return 1 if report["invariant_violations"] else 0


def _cmd_generate(args) -> int:
    raw = args.spec
    if not raw.lstrip().startswith("{"):
        with open(raw, encoding="utf-8") as fh:
            raw = fh.read()
    spec_d = json.loads(raw)
    spec_d.setdefault("tenant", "t0")
    spec = WorkloadConfig(**spec_d)
    if spec.ops_per_thread is None and args.limit is None:
        print("an unbounded generator needs ops_per_thread or --limit", file=sys.stderr)
        return 2
    n = write_trace(generate(spec, args.seed, args.tenant, args.limit), args.out)
    print(f"wrote {n} events to {args.out}", file=sys.stderr)
    return 0


def _cmd_report(args) -> int:
    with open(args.compare[0], encoding="utf-8") as fh:
        a = json.load(fh)
    with open(args.compare[1], encoding="utf-8") as fh:
        b = json.load(fh)
    cmp = compare_reports(a, b)
    print(f"{'tenant':<16} {'slowdown':>10}")
    for row in cmp["tenants"]:
        s = "n/a" if row["slowdown"] is None else f"{row['slowdown']:.3f}"
        print(f"{row['tenant']:<16} {s:>10}")
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"  # noqa: E731
    print(f"WMMR {fmt(cmp['wmmr_a'])} -> {fmt(cmp['wmmr_b'])} (delta {fmt(cmp['wmmr_delta'])})")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="farswap-sim", description="Multi-tenant remote-memory swap simulator")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one scenario")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--duration-ns", type=int)
    r.add_argument("--event-log")
    r.add_argument("--sched-trace", help="CSV of scheduler dispatch/drop decisions")
    r.add_argument("--out", help="report JSON path (default stdout)")
    r.add_argument("--csv", help="directory for CSV exports")
    r.add_argument("--wall-clock", action="store_true", help="include wall-clock seconds in the report")
    r.add_argument("--check-order", action="store_true", help="assert event ordering on every pop")
    r.set_defaults(func=_cmd_run)

    g = sub.add_parser("generate-trace", help="write a synthetic trace file")
    g.add_argument("--spec", required=True, help="inline JSON or a path to a JSON workload spec")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tenant", type=int, default=0)
    g.add_argument("--limit", type=int, help="stop after this many events")
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    c = sub.add_parser("report", help="compare two run reports")
    c.add_argument("--compare", nargs=2, required=True, metavar=("A", "B"))
    c.set_defaults(func=_cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
