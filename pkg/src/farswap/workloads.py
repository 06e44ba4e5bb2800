"""Synthetic access-pattern generators and trace-file replay.

Every generator produces, per thread, a stream of ``TraceEvent`` with
nondecreasing times (exponential inter-arrival at the configured per-thread
rate).  Metadata events (reference writes, array allocations, thread tags)
are emitted at the start of the owning thread's stream with zero think time.

Trace format, one event per line::

    time_ns,tenant,thread,op,arg1[,arg2]

``op`` is one of R (read page), W (write page), REF (src_addr, dst_addr),
ARR (start_addr, length_bytes), TAG (App|Aux).
"""

from __future__ import annotations

import gzip
import heapq
import io
import itertools
import random
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, TextIO

from .engine import SeededRng
from .model import PAGE_SIZE, SimError, WorkloadConfig

ADDRESS_SPACE_PAGES = 2**36  # 48-bit virtual addresses

READ = "R"
WRITE = "W"
REF = "REF"
ARR = "ARR"
TAG = "TAG"
OPS = (READ, WRITE, REF, ARR, TAG)


class FootprintExceedsAddressSpace(SimError):
    pass


class ParseError(SimError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class NonMonotonicTime(ParseError):
    pass


@dataclass(frozen=True, slots=True)
class TraceEvent:
    time: int
    tenant: int
    thread: int
    op: str
    arg1: object = None
    arg2: Optional[int] = None

    def to_line(self) -> str:
        if self.arg2 is None:
            return f"{self.time},{self.tenant},{self.thread},{self.op},{self.arg1}"
        return f"{self.time},{self.tenant},{self.thread},{self.op},{self.arg1},{self.arg2}"


# --- page-sequence generators ------------------------------------------------
# Each yields (op, arg1, arg2) for one thread; the caller stamps times.


def _rw(rng: random.Random, write_ratio: float, page: int):
    if write_ratio > 0 and rng.random() < write_ratio:
        return (WRITE, page, None)
    return (READ, page, None)


def _sequential(spec: WorkloadConfig, rng, t: int):
    fp = spec.footprint_pages
    span = max(1, fp // spec.threads)
    base = (t * span) % fp
    i = 0
    while True:
        yield _rw(rng, spec.write_ratio, base + i % span)
        i += 1


def _strided(spec: WorkloadConfig, rng, t: int):
    fp = spec.footprint_pages
    s = int(spec.params.get("stride", 4))
    span = max(1, fp // spec.threads)
    base = (t * span) % fp
    laps = (span + s - 1) // s
    i = 0
    while True:
        lap, k = divmod(i, laps)
        off = (k * s + lap % s) % span
        yield _rw(rng, spec.write_ratio, base + off)
        i += 1


def _uniform(spec: WorkloadConfig, rng, t: int):
    fp = spec.footprint_pages
    while True:
        yield _rw(rng, spec.write_ratio, rng.randrange(fp))


def zipf_cum_weights(n: int, theta: float) -> list[float]:
    acc = 0.0
    out = []
    for r in range(1, n + 1):
        acc += r**-theta
        out.append(acc)
    return out


def _zipf(spec: WorkloadConfig, rng, t: int):
    fp = spec.footprint_pages
    cum = zipf_cum_weights(fp, float(spec.params.get("theta", 0.99)))
    pages = range(fp)
    while True:
        for p in rng.choices(pages, cum_weights=cum, k=1024):
            yield _rw(rng, spec.write_ratio, p)


def _epochal(spec: WorkloadConfig, rng, t: int):
    fp = spec.footprint_pages
    ws = int(spec.params.get("working_set", max(1, fp // 4)))
    epoch_len = int(spec.params.get("epoch_len", 10_000))
    shift = int(spec.params.get("shift", ws))
    i = 0
    while True:
        base = ((i // epoch_len) * shift) % fp
        yield _rw(rng, spec.write_ratio, (base + rng.randrange(ws)) % fp)
        i += 1


def _interleaved_strided(spec: WorkloadConfig, rng, t: int):
    fp = spec.footprint_pages
    strides = [int(s) for s in spec.params.get("strides", [1, 2, 3, 5])]
    s = strides[t % len(strides)]
    span = max(1, fp // spec.threads)
    base = t * span
    laps = (span + s - 1) // s
    i = 0
    while True:
        lap, k = divmod(i, laps)
        off = (k * s + lap % s) % span
        yield _rw(rng, spec.write_ratio, base + off)
        i += 1


def chase_layout(spec: WorkloadConfig, rng: random.Random) -> tuple[list[int], list[tuple[int, int]]]:
    """Node order of a pointer-chasing walk and the reference edges that link it.

    Nodes are one page each and are allocated in clusters of ``cluster_pages``
    consecutive pages.  The walk visits the clusters in a random order and the
    nodes inside each cluster in a random order, so neither the walk nor its
    page deltas carry a stride.  Edges follow the walk (``out_degree`` 1 is a
    list); extra out-edges point at random clusters.
    """
    fp = spec.footprint_pages
    cl = int(spec.params.get("cluster_pages", 16))
    out_degree = int(spec.params.get("out_degree", 1))
    clusters = list(range((fp + cl - 1) // cl))
    rng.shuffle(clusters)
    order: list[int] = []
    for c in clusters:
        members = [p for p in range(c * cl, min(fp, (c + 1) * cl))]
        rng.shuffle(members)
        order.extend(members)
    edges = []
    n = len(order)
    for i, p in enumerate(order):
        edges.append((p, order[(i + 1) % n]))
        for _ in range(out_degree - 1):
            edges.append((p, rng.randrange(fp)))
    return order, edges


def _pointer_chase(spec: WorkloadConfig, rng, t: int, layout):
    order, edges = layout
    if t == 0:
        # the build phase stores every reference once
        for src, dst in edges:
            yield (REF, src * PAGE_SIZE, dst * PAGE_SIZE)
    n = len(order)
    i = (t * n) // spec.threads
    while True:
        yield _rw(rng, spec.write_ratio, order[i % n])
        i += 1


def _hot_then_abandon(spec: WorkloadConfig, rng, t: int):
    """Touch a window of pages repeatedly for a while, then move on for good."""
    fp = spec.footprint_pages
    window = int(spec.params.get("window", 64))
    dwell = int(spec.params.get("dwell", 8))
    share = max(1, fp // spec.threads)
    span = max(window, share)
    base = t * share
    w0 = 0
    while True:
        # regions overlap when a window is wider than a thread's share
        pages = [(base + (w0 + k) % span) % fp for k in range(window)]
        for _ in range(dwell):
            for p in pages:
                yield _rw(rng, spec.write_ratio, p)
        w0 = (w0 + window) % span


def _runs_and_noise(spec: WorkloadConfig, rng, t: int):
    """Mostly isolated random pages with occasional short sequential runs."""
    fp = spec.footprint_pages
    run_prob = float(spec.params.get("run_prob", 0.1))
    run_len = int(spec.params.get("run_len", 16))
    while True:
        p = rng.randrange(fp)
        if rng.random() < run_prob:
            for k in range(run_len):
                yield _rw(rng, spec.write_ratio, (p + k) % fp)
        else:
            yield _rw(rng, spec.write_ratio, p)


_GENERATORS = {
    "sequential": _sequential,
    "strided": _strided,
    "uniform": _uniform,
    "zipf": _zipf,
    "epochal": _epochal,
    "interleaved-strided": _interleaved_strided,
    "hot-then-abandon": _hot_then_abandon,
    "runs-and-noise": _runs_and_noise,
}


def _preamble(spec: WorkloadConfig, t: int):
    aux = int(spec.params.get("aux_threads", 0))
    yield (TAG, "Aux" if t >= spec.threads - aux else "App", None)
    if t == 0 and spec.kind == "interleaved-strided" and spec.params.get("arrays", True):
        span = max(1, spec.footprint_pages // spec.threads)
        for k in range(spec.threads):
            yield (ARR, k * span * PAGE_SIZE, span * PAGE_SIZE)


def thread_ops(spec: WorkloadConfig, seed: int, tenant: int, thread: int, stream: str = "wl", layout=None):
    """Untimed (op, arg1, arg2) stream for one thread, preamble included."""
    if spec.footprint_pages <= 0:
        raise FootprintExceedsAddressSpace("footprint must be positive")
    if spec.footprint_pages > ADDRESS_SPACE_PAGES:
        raise FootprintExceedsAddressSpace(f"{spec.footprint_pages} pages do not fit in 48-bit addresses")
    rng = SeededRng(seed).stream(tenant, f"{stream}/t{thread}")
    yield from _preamble(spec, thread)
    if spec.kind == "pointer-chase":
        if layout is None:
            layout = chase_layout(spec, SeededRng(seed).stream(tenant, f"{stream}/layout"))
        gen = _pointer_chase(spec, rng, thread, layout)
    else:
        gen = _GENERATORS[spec.kind](spec, rng, thread)
    aux = int(spec.params.get("aux_threads", 0))
    if thread >= spec.threads - aux:
        gen = _uniform(spec, rng, thread)
    n = spec.ops_per_thread
    count = 0
    for op in gen:
        yield op
        if op[0] in (READ, WRITE):
            count += 1
            if n is not None and count >= n:
                return


def thread_events(spec: WorkloadConfig, seed: int, tenant: int, thread: int, stream: str = "wl", layout=None) -> Iterator[TraceEvent]:
    """Timed events for one thread."""
    clock = SeededRng(seed).stream(tenant, f"{stream}/clock{thread}")
    mean_ns = 1e9 / spec.rate
    now = 0
    for op, a, b in thread_ops(spec, seed, tenant, thread, stream, layout):
        if op in (READ, WRITE):
            now += max(1, int(round(clock.expovariate(1.0) * mean_ns)))
        yield TraceEvent(now, tenant, thread, op, a, b)


def generate(spec: WorkloadConfig, seed: int, tenant: int = 0, limit: Optional[int] = None) -> Iterator[TraceEvent]:
    """Merged, time-ordered stream of all threads of ``spec``.

    Ties are broken by thread id, so the stream is a pure function of (spec, seed).
    """
    if spec.kind == "trace":
        yield from itertools.islice(replay(spec.params["path"]), limit)
        return
    layout = None
    if spec.kind == "pointer-chase":
        layout = chase_layout(spec, SeededRng(seed).stream(tenant, "wl/layout"))
    streams = [thread_events(spec, seed, tenant, t, "wl", layout) for t in range(spec.threads)]
    merged = heapq.merge(*streams, key=lambda e: (e.time, e.thread))
    yield from itertools.islice(merged, limit)


# --- trace files ---------------------------------------------------------------


def _open_text(path, mode: str) -> TextIO:
    path = str(path)
    if path.endswith(".gz"):
        return io.TextIOWrapper(gzip.open(path, mode + "b"), encoding="utf-8")
    return open(path, mode, encoding="utf-8")


def write_trace(events: Iterable[TraceEvent], path) -> int:
    n = 0
    with _open_text(path, "w") as fh:
        for e in events:
            fh.write(e.to_line() + "\n")
            n += 1
    return n


def parse_line(line: str, lineno: int) -> TraceEvent:
    parts = line.strip().split(",")
    if len(parts) not in (5, 6):
        raise ParseError(lineno, f"expected 5 or 6 fields, got {len(parts)}")
    try:
        time, tenant, thread = int(parts[0]), int(parts[1]), int(parts[2])
    except ValueError as exc:
        raise ParseError(lineno, str(exc)) from None
    op = parts[3]
    if op not in OPS:
        raise ParseError(lineno, f"unknown op {op!r}")
    if op == TAG:
        if parts[4] not in ("App", "Aux") or len(parts) != 5:
            raise ParseError(lineno, "TAG takes App or Aux")
        return TraceEvent(time, tenant, thread, op, parts[4])
    try:
        a = int(parts[4])
        b = int(parts[5]) if len(parts) == 6 else None
    except ValueError as exc:
        raise ParseError(lineno, str(exc)) from None
    if op in (REF, ARR) and b is None:
        raise ParseError(lineno, f"{op} needs two arguments")
    if op in (READ, WRITE) and b is not None:
        raise ParseError(lineno, f"{op} takes one argument")
    if time < 0 or a < 0:
        raise ParseError(lineno, "negative value")
    return TraceEvent(time, tenant, thread, op, a, b)


def replay(path) -> Iterator[TraceEvent]:
    last = -1
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip() or line.startswith("#"):
                continue
            e = parse_line(line, lineno)
            if e.time < last:
                raise NonMonotonicTime(lineno, f"time {e.time} < previous {last}")
            last = e.time
            yield e


# --- analysis helpers -----------------------------------------------------------


def hotness_replay(pages: Iterable[int], scan_every: int, scan_size: int = 64, sets: int = 3) -> dict[int, int]:
    """Replay a page sequence against an idealized recency list.

    Every ``scan_every`` accesses the ``scan_size`` most recent distinct pages
    form a head-set; returns, per page, how many separate times it became hot
    (appeared in ``sets`` consecutive head-sets).
    """
    from collections import OrderedDict

    recency: OrderedDict[int, None] = OrderedDict()
    streak: dict[int, int] = {}
    became: dict[int, int] = {}
    for i, p in enumerate(pages, 1):
        recency[p] = None
        recency.move_to_end(p)
        if i % scan_every == 0:
            head = list(itertools.islice(reversed(recency), scan_size))
            new = {}
            for q in head:
                s = streak.get(q, 0) + 1
                new[q] = s
                if s == sets:
                    became[q] = became.get(q, 0) + 1
            streak = new
    return became
