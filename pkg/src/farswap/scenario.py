"""Scenario orchestration: threads, closed-loop access replay, run reports."""

from __future__ import annotations

import csv
import json
import os
import time as wallclock
from dataclasses import dataclass, field
from typing import Iterator, Optional, TextIO

from . import engine as ev
from .metrics import LatencyHistogram, accuracy, contribution, wmmr
from .model import PAGE_SIZE, RequestKind, ScenarioConfig, WorkloadConfig, validate_config
from .prefetch import ThreadKind
from .sched import IN, OUT
from .swap import SwapSystem
from .workloads import ARR, READ, REF, TAG, WRITE, TraceEvent, chase_layout, replay, thread_events
from .engine import SeededRng

REPORT_VERSION = 1
THREAD_KEY_BITS = 20


@dataclass
class SimThread:
    tenant: int
    tid: int
    events: Iterator[TraceEvent]
    page_base: int
    closed_loop: bool
    last_time: int = 0
    pending: Optional[TraceEvent] = None
    done: bool = False
    blocked: bool = False
    ops_done: int = 0
    finished_at: Optional[int] = None


@dataclass
class TenantRun:
    finite: bool = True
    threads: list = field(default_factory=list)
    completion_ns: Optional[int] = None


class Simulation:
    def __init__(
        self,
        cfg: ScenarioConfig,
        event_log: Optional[TextIO] = None,
        sched_trace: Optional[TextIO] = None,
        check_order: bool = False,
    ):
        self.cfg = cfg
        self.engine = ev.Engine(event_log, check_order)
        self.system = SwapSystem(cfg, self.engine, self._wake, sched_trace)
        self.threads: dict[tuple[int, int], SimThread] = {}
        self.runs = [TenantRun() for _ in cfg.tenants]
        self._unfinished_finite = 0
        self.engine.on(ev.ACCESS, self._on_access)
        self.engine.on(ev.RESUME, self._on_resume)
        self._build(cfg.workloads)
        self.system.start_scans()
        for th in self.threads.values():
            self._step(th, 0)

    # --- setup --------------------------------------------------------------

    def _build(self, workloads: list[WorkloadConfig]) -> None:
        cfg = self.cfg
        next_base = [0] * len(cfg.tenants)
        next_tid = [0] * len(cfg.tenants)
        for widx, w in enumerate(workloads):
            t = cfg.tenant_index(w.tenant)
            ts = self.system.tenants[t]
            base = next_base[t]
            next_base[t] += w.footprint_pages
            for p in range(int(w.params.get("shared_pages", 0))):
                ts.shared_pages.add(base + p)
            run = self.runs[t]
            if w.kind == "trace":
                per_thread = _split_trace(w, t)
                streams = {tid: iter(evs) for tid, evs in sorted(per_thread.items())}
            else:
                if w.ops_per_thread is None:
                    run.finite = False
                layout = None
                if w.kind == "pointer-chase":
                    layout = chase_layout(w, SeededRng(cfg.seed).stream(t, f"w{widx}/layout"))
                streams = {
                    k: thread_events(w, cfg.seed, t, k, f"w{widx}", layout) for k in range(w.threads)
                }
            for k, stream in streams.items():
                tid = next_tid[t] + k
                th = SimThread(t, tid, stream, base, w.closed_loop)
                self.threads[(t, tid)] = th
                run.threads.append(th)
            next_tid[t] += (max(streams) + 1) if streams else 0
        for run in self.runs:
            if not run.threads:
                run.finite = False
            if run.finite:
                self._unfinished_finite += 1

    # --- thread execution ---------------------------------------------------

    def _thread_key(self, th: SimThread) -> int:
        # unique across tenants so a shared prefetcher keeps threads apart
        return (th.tenant << THREAD_KEY_BITS) | th.tid if self.system.shared else th.tid

    def _step(self, th: SimThread, now: int) -> None:
        """Apply metadata events and schedule the thread's next access."""
        ts = self.system.tenants[th.tenant]
        pf = ts.prefetcher
        off = th.page_base * PAGE_SIZE
        for e in th.events:
            op = e.op
            if op == READ or op == WRITE:
                gap = e.time - th.last_time
                th.last_time = e.time
                th.pending = e
                at = now + gap if th.closed_loop else max(now, e.time)
                self.engine.schedule(at, ev.ACCESS, th.tenant, th.tid)
                return
            if op == TAG:
                pf.tag_thread(self._thread_key(th), ThreadKind(e.arg1))
            elif op == REF:
                pf.record_reference(e.arg1 + off, e.arg2 + off)
            elif op == ARR:
                pf.record_array(e.arg1 + off, e.arg2, e.thread)
        th.done = True
        th.pending = None
        th.finished_at = now
        run = self.runs[th.tenant]
        if run.finite and all(t.done for t in run.threads):
            run.completion_ns = max(t.finished_at for t in run.threads)
            self._unfinished_finite -= 1
            if self._unfinished_finite == 0:
                self.engine.stop()

    def _on_access(self, e: ev.SimEvent) -> None:
        th = self.threads[(e.tenant, e.data)]
        op = th.pending
        th.pending = None
        stall = self.system.access(th.tenant, self._thread_key(th), th.page_base + op.arg1, op.op == WRITE, e.time)
        th.ops_done += 1
        if stall is None:
            th.blocked = True
            return
        self._step(th, e.time + stall)

    def _wake(self, tenant: int, thread_key: int, at: int) -> None:
        tid = thread_key & ((1 << THREAD_KEY_BITS) - 1) if self.system.shared else thread_key
        self.engine.schedule(at, ev.RESUME, tenant, tid)

    def _on_resume(self, e: ev.SimEvent) -> None:
        th = self.threads[(e.tenant, e.data)]
        th.blocked = False
        self._step(th, e.time)

    # --- running ------------------------------------------------------------

    def run(self, include_wall_clock: bool = False) -> dict:
        t0 = wallclock.perf_counter()
        if self._unfinished_finite == 0 and any(r.finite for r in self.runs):
            self.engine.stop()
        else:
            self.engine.run_until(self.cfg.duration_ns)
        report = self.report()
        if include_wall_clock:
            report["wall_clock_s"] = wallclock.perf_counter() - t0
        return report

    def report(self) -> dict:
        sys_ = self.system
        sched = sys_.sched
        cfg = self.cfg
        now = self.engine.now
        tenants = []
        for ts, run in zip(sys_.tenants, self.runs):
            c = ts.counters
            lat = {}
            for kind, name in ((RequestKind.DEMAND_IN, "demand"), (RequestKind.PREFETCH_IN, "prefetch"), (RequestKind.SWAP_OUT, "swap_out")):
                h = sched.latency.get((ts.idx, kind)) or LatencyHistogram()
                lat[name] = h.to_dict()
            sent = c.prefetches_issued - c.prefetches_dropped
            ops = sum(th.ops_done for th in run.threads)
            tenants.append(
                {
                    "name": ts.cfg.name,
                    "completion_ns": run.completion_ns,
                    "finished": run.completion_ns is not None,
                    "ops_completed": ops,
                    "counters": c.to_dict(),
                    "contribution": contribution(c.cache_hits, c.faults),
                    "accuracy": accuracy(c.prefetch_hits, sent),
                    "swap_out_throughput_per_s": (c.swap_outs / (now / 1e9)) if now else 0.0,
                    "timeliness_theta_ns": sched.theta(ts.idx),
                    "latency": lat,
                }
            )
        x, w = [], []
        for i, tc in enumerate(cfg.tenants):
            x.append(sched.stats.bytes_by_tenant.get((IN, i), 0) + sched.stats.bytes_by_tenant.get((OUT, i), 0))
            w.append(tc.bandwidth_weight)
        link = sched.links[IN]
        report = {
            "report_version": REPORT_VERSION,
            "seed": cfg.seed,
            "config_hash": cfg.config_hash(),
            "mode": cfg.mode,
            "scheduler_mode": sched.mode,
            "sim_time_ns": now,
            "events": self.engine.stats.dispatched,
            "events_by_kind": dict(sorted(self.engine.stats.by_kind.items())),
            "tenants": tenants,
            "global": {
                "wmmr": wmmr(x, w) if any(x) else None,
                "bytes_in": link.bytes_sent,
                "bytes_out": sched.links[OUT].bytes_sent,
                "fabric_in_utilization": (link.busy_ns / now) if now else 0.0,
            },
            "invariant_violations": sys_.check_invariants(),
        }
        return report


def _split_trace(w: WorkloadConfig, tenant: int) -> dict[int, list[TraceEvent]]:
    want = int(w.params.get("trace_tenant", tenant))
    out: dict[int, list[TraceEvent]] = {}
    for e in replay(w.params["path"]):
        if e.tenant == want:
            out.setdefault(e.thread, []).append(e)
    return out


def run_scenario(
    cfg: ScenarioConfig | dict,
    seed: Optional[int] = None,
    event_log: Optional[TextIO] = None,
    sched_trace: Optional[TextIO] = None,
    include_wall_clock: bool = False,
) -> dict:
    cfg = validate_config(cfg)
    if seed is not None:
        cfg.seed = seed
    return Simulation(cfg, event_log, sched_trace).run(include_wall_clock)


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


# --- CSV exports ----------------------------------------------------------------

LATENCY_CSV_COLUMNS = ("tenant", "kind", "bucket_upper_ns", "count", "cdf")
COUNTER_CSV_PREFIX = ("tenant",)
ALLOC_CSV_COLUMNS = ("tenant", "lock_path", "reserved_path", "cancellations", "alloc_latency_ns_total")


def write_csvs(report: dict, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    edges = LatencyHistogram.upper_edges()
    paths = []
    p = os.path.join(out_dir, "latency_cdf.csv")
    with open(p, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(LATENCY_CSV_COLUMNS)
        for t in report["tenants"]:
            for kind, h in sorted(t["latency"].items()):
                total = h["count"]
                acc = 0
                for edge, cnt in zip(edges, h["buckets"]):
                    acc += cnt
                    wr.writerow((t["name"], kind, edge, cnt, f"{acc / total:.6f}" if total else ""))
    paths.append(p)
    p = os.path.join(out_dir, "counters.csv")
    with open(p, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        names = list(report["tenants"][0]["counters"]) if report["tenants"] else []
        wr.writerow(COUNTER_CSV_PREFIX + tuple(names) + ("contribution", "accuracy", "completion_ns"))
        for t in report["tenants"]:
            wr.writerow(
                [t["name"]]
                + [t["counters"][n] for n in names]
                + [t["contribution"], t["accuracy"], t["completion_ns"]]
            )
    paths.append(p)
    p = os.path.join(out_dir, "allocator.csv")
    with open(p, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(ALLOC_CSV_COLUMNS)
        for t in report["tenants"]:
            c = t["counters"]
            wr.writerow((t["name"], c["lock_path_allocs"], c["reserved_path_allocs"], c["cancellations"], c["alloc_latency_ns"]))
    paths.append(p)
    return paths


def compare_reports(a: dict, b: dict) -> dict:
    """Per-tenant completion-time ratio b/a and WMMR delta."""
    rows = []
    by_name = {t["name"]: t for t in a["tenants"]}
    for t in b["tenants"]:
        base = by_name.get(t["name"])
        ratio = None
        if base and base["completion_ns"] and t["completion_ns"]:
            ratio = t["completion_ns"] / base["completion_ns"]
        rows.append({"tenant": t["name"], "slowdown": ratio})
    wa, wb = a["global"]["wmmr"], b["global"]["wmmr"]
    return {"tenants": rows, "wmmr_a": wa, "wmmr_b": wb, "wmmr_delta": (wb - wa) if wa is not None and wb is not None else None}
