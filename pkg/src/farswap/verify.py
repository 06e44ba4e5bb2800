"""Exhaustive small-model checks.

``explore_fsm`` drives a single page through every sequence of allocator
operations up to a depth bound and checks the page FSM and entry
conservation after each step.  ``explore_drop_protocol`` runs the real swap
path and scheduler on a one-page world under an engine that may fire any
pending event next, covering every interleaving of faults, dispatches, drops,
completions and timeouts.
"""

from __future__ import annotations

import copy
import pickle
from collections import deque
from dataclasses import dataclass, field

from . import engine as ev
from .alloc import (
    ContentionTracker,
    EntryAllocator,
    HotnessTracker,
    LockCostModel,
    Partition,
    check_reservation_invariant,
)
from .model import (
    EntryState,
    IllegalTransition,
    PageDescriptor,
    PageState,
    Residency,
    SimError,
    validate_config,
)
from .swap import SwapSystem


@dataclass
class ExploreResult:
    states: int = 0
    transitions: int = 0
    max_depth: int = 0
    violations: list = field(default_factory=list)
    start_states: set = field(default_factory=set)
    seen_fsm_states: set = field(default_factory=set)
    max_requests_per_entry: int = 0
    terminal_states: int = 0


# --- page FSM -----------------------------------------------------------------

FSM_OPS = ("swap_out", "swap_in", "write", "scan_hot", "scan_cold", "pressure_on", "pressure_off")


class _FsmWorld:
    def __init__(self, adaptive: bool, keep_clean: bool):
        part = Partition(0, 4, 0, cluster_size=2)
        self.alloc = EntryAllocator(
            part,
            LockCostModel(500.0, 0.0, 1.0),
            ContentionTracker(10_000),
            adaptive=adaptive,
            keep_clean_entries=keep_clean,
            keep_clean_threshold=1.0,
            removal_fraction=2.0,
            hotness=HotnessTracker(sets=1, scan_size=64),
        )
        self.page = PageDescriptor(page=0, tenant=0, residency=Residency.MAPPED, dirty=True)

    def key(self) -> tuple:
        p = self.page
        part = self.alloc.partition
        return (
            p.fsm_state,
            p.reserved_entry,
            p.entry,
            p.dirty,
            p.residency,
            tuple(e.state for e in part.entries),
            part.free_count,
            tuple(sorted(self.alloc.hotness.streak.items())),
            tuple(sorted(self.alloc._hot)),
            self.alloc.removal_fraction,
        )

    def enabled(self, op: str) -> bool:
        mapped = self.page.residency is Residency.MAPPED
        if op in ("swap_out", "write", "scan_hot"):
            return mapped
        if op == "swap_in":
            return not mapped
        if op == "pressure_on":
            return self.alloc.removal_fraction > 1
        if op == "pressure_off":
            return self.alloc.removal_fraction <= 1
        return True

    def apply(self, op: str) -> None:
        p, a = self.page, self.alloc
        resident = {p.key: p} if p.residency is Residency.MAPPED else {}
        if op == "swap_out":
            before = p.fsm_state
            eid, took, _ = a.swap_out_entry(p, 0)
            if before in (PageState.COLD_RES, PageState.HOT_RES) and took:
                raise AssertionError(f"swap-out from {before.value} took the lock path")
            p.entry = eid
            p.residency = Residency.REMOTE
        elif op == "swap_in":
            a.on_map(p)
            p.residency = Residency.MAPPED
        elif op == "write":
            p.dirty = True
        elif op == "scan_hot":
            a.scan_and_cancel([p], resident, 0)
        elif op == "scan_cold":
            a.scan_and_cancel([], resident, 0)
        elif op == "pressure_on":
            a.removal_fraction = 0.0
        elif op == "pressure_off":
            a.removal_fraction = 2.0

    def check(self) -> None:
        p = self.page
        part = self.alloc.partition
        if p.fsm_state is not PageState.SWAPPED_OUT:
            check_reservation_invariant(p)
        counts = part.counts()
        if sum(counts.values()) != part.capacity or counts[EntryState.FREE] != part.free_count:
            raise AssertionError("entry conservation broken")
        held = {x for x in (p.entry, p.reserved_entry) if x is not None}
        busy = {e.id for e in part.entries if e.state is not EntryState.FREE}
        if held != busy:
            raise AssertionError(f"page holds {held} but non-free entries are {busy}")
        if p.residency is Residency.REMOTE:
            if p.fsm_state is not PageState.SWAPPED_OUT or part.entry(p.entry).state is not EntryState.OCCUPIED:
                raise AssertionError("remote page without an occupied entry")
        elif p.reserved_entry is not None and part.entry(p.reserved_entry).state is not EntryState.RESERVED:
            raise AssertionError("local page's reservation is not in Reserved state")


def _fsm_starts(adaptive: bool, keep_clean: bool) -> list[_FsmWorld]:
    """One world per reachable FSM state, built through real operations."""
    recipes = [
        (),
        ("swap_out",),
        ("swap_out", "swap_in"),
        ("swap_out", "swap_in", "scan_hot"),
        ("scan_hot",),
        ("pressure_on", "swap_out", "swap_in", "scan_hot"),
    ]
    out = []
    for r in recipes:
        w = _FsmWorld(adaptive, keep_clean)
        for op in r:
            w.apply(op)
        out.append(w)
    return out


def explore_fsm(depth: int = 8) -> ExploreResult:
    """Breadth-first over every op sequence of length <= ``depth`` from every start state.

    Worlds are deduplicated on their complete state, so each distinct
    (state, remaining depth) pair is expanded once; the next state depends only
    on the current state, which makes this equivalent to enumerating sequences.
    """
    res = ExploreResult()
    for adaptive in (True, False):
        for keep_clean in (False, True):
            if adaptive and keep_clean:
                continue
            best: dict[tuple, int] = {}
            queue: deque[tuple[_FsmWorld, int, tuple]] = deque()
            for w in _fsm_starts(adaptive, keep_clean):
                res.start_states.add(w.page.fsm_state)
                queue.append((w, 0, ()))
            while queue:
                w, d, path = queue.popleft()
                k = w.key()
                if best.get(k, depth + 1) <= d:
                    continue
                best[k] = d
                res.states += 1
                res.seen_fsm_states.add(w.page.fsm_state)
                res.max_depth = max(res.max_depth, d)
                if d == depth:
                    continue
                for op in FSM_OPS:
                    if not w.enabled(op):
                        continue
                    nxt = copy.deepcopy(w)
                    res.transitions += 1
                    try:
                        nxt.apply(op)
                        nxt.check()
                    except (IllegalTransition, AssertionError, SimError) as exc:
                        res.violations.append((adaptive, keep_clean, path + (op,), repr(exc)))
                        continue
                    queue.append((nxt, d + 1, path + (op,)))
    return res


# --- drop protocol --------------------------------------------------------------


class ExploringEngine(ev.Engine):
    """An engine whose driver picks which pending event fires next.

    Events scheduled in the past are clamped to ``now`` instead of rejected,
    since out-of-order firing is the point.
    """

    def schedule(self, time, kind, tenant=-1, data=None):
        return super().schedule(max(time, self.now), kind, tenant, data)

    def pending_events(self) -> list[ev.SimEvent]:
        return sorted((e for _, _, e in self._heap), key=lambda e: e.seq)

    def fire(self, seq: int) -> ev.SimEvent:
        for i, (_, s, e) in enumerate(self._heap):
            if s == seq:
                self._heap.pop(i)
                break
        else:
            raise KeyError(seq)
        self._heap.sort()
        self.now = max(self.now, e.time)
        e.time = self.now  # a late-fired event happens now
        handler = self._handlers.get(e.kind)
        if handler is not None:
            handler(e)
        return e


TIMEOUT_NS = 100
NEVER_DROP = 10**15


class _DropWorld:
    def __init__(self, threads: int = 2, prefetches: int = 2, evictions: int = 1, ticks: int = 1):
        cfg = validate_config(
            {
                "tenants": [
                    {
                        "name": "t",
                        "local_mem_pages": 12,
                        "remote_partition_pages": 8,
                        "swap_cache_bytes": 4 * 4096,
                        "prefetcher": "none",
                        "allocator": "adaptive",
                    }
                ],
                "workloads": [],
                "fabric": {"bandwidth_bytes_per_s": 4096e9, "base_latency_ns": 0, "max_inflight": 4},
                "scheduler": {"mode": "canvas", "reissue_timeout_ns": TIMEOUT_NS, "timeliness_bootstrap_ns": NEVER_DROP},
                "fault_overhead_ns": 0,
            }
        )
        self.engine = ExploringEngine()
        self.sys = SwapSystem(cfg, self.engine, self._wake)
        self.engine.on(ev.RESUME, self._on_resume)
        self.blocked = [False] * threads
        # the writer touches the page twice: once to fault, once after it is mapped
        self.left = [1] * (threads - 1) + [2]
        self.budget = {"prefetch": prefetches, "evict": evictions, "tick": ticks}
        # the page starts out remote: first touch, evict, release from the cache
        s = self.sys
        s.access(0, 0, 0, False, 0)
        s.evict(0, 1, 0)
        self._drain()
        s.shrink_cache(s.tenants[0].cache, self.engine.now, need=s.tenants[0].cache.capacity)
        assert s.tenants[0].pages[0].residency is Residency.REMOTE

    def _drain(self) -> None:
        while self.engine._heap:
            self.engine.fire(self.engine.pending_events()[0].seq)

    def _wake(self, tenant: int, thread: int, at: int) -> None:
        self.engine.schedule(at, ev.RESUME, tenant, thread)

    def _on_resume(self, e: ev.SimEvent) -> None:
        self.blocked[e.data] = False

    @property
    def page(self) -> PageDescriptor:
        return self.sys.tenants[0].pages[0]

    def _prefetch_at_head(self) -> bool:
        fq = self.sys.sched.flows[0]
        return not fq.demand and bool(fq.prefetch)

    def actions(self) -> list[tuple]:
        out = []
        for th, left in enumerate(self.left):
            if left and not self.blocked[th]:
                out.append(("access", th))
        page = self.page
        if self.budget["prefetch"] and page.residency is Residency.REMOTE and self.sys.entry(page.entry).valid:
            out.append(("prefetch",))
        if self.budget["evict"] and page.residency is Residency.MAPPED:
            out.append(("evict",))
        cp = self.sys.tenants[0].cache.get(page.key)
        if cp is not None and not cp.locked and not cp.writeback:
            out.append(("release",))
        if self.budget["tick"] and any(self.blocked):
            out.append(("tick",))
        for e in self.engine.pending_events():
            if e.kind == ev.SCHEDULER_DISPATCH and e.data == "in" and self._prefetch_at_head():
                out.append(("fire", e.seq, "drop"))
            out.append(("fire", e.seq, "keep"))
        return out

    def apply(self, act: tuple) -> None:
        s = self.sys
        now = self.engine.now
        kind = act[0]
        if kind == "access":
            th = act[1]
            self.left[th] -= 1
            # the last thread writes, so a later eviction must write back into
            # the reserved entry while older reads of it may still be in flight
            write = th == len(self.left) - 1
            if s.access(0, th, 0, write, now) is None:
                self.blocked[th] = True
        elif kind == "prefetch":
            self.budget["prefetch"] -= 1
            s.issue_prefetches(s.tenants[0], [0], now)
        elif kind == "evict":
            self.budget["evict"] -= 1
            s.evict(0, 1, now)
        elif kind == "release":
            s.shrink_cache(s.tenants[0].cache, now, need=s.tenants[0].cache.capacity)
        elif kind == "tick":
            self.budget["tick"] -= 1
            self.engine.now = now + TIMEOUT_NS + 1
        else:
            est = s.sched.timeliness[0]
            est.bootstrap = 0 if act[2] == "drop" else NEVER_DROP
            try:
                self.engine.fire(act[1])
            finally:
                est.bootstrap = NEVER_DROP

    def requests_on_entry(self) -> int:
        page = self.page
        ids = {page.entry, page.reserved_entry} - {None}
        n = 0
        for req in self.sys._requests.values():
            if req.entry in ids or req.page == page.page:
                n += 1
        return n

    def key(self) -> tuple:
        s = self.sys
        p = self.page
        cache = s.tenants[0].cache
        sched = s.sched
        entries = tuple((e.state, e.valid, e.timestamp) for part in s._partitions for e in part.entries)
        return (
            self.engine.now,
            p.residency,
            p.entry,
            p.prefetched,
            p.dirty,
            entries,
            tuple((k, cp.locked, cp.writeback, cp.request) for k, cp in cache.resident.items()),
            cache.orphans,
            tuple(sorted((k, tuple(v)) for k, v in s._waiters.items())),
            tuple(sorted(s._timeouts_armed)),
            tuple((r.kind, r.id) for fq in sched.flows.values() for q in (fq.demand, fq.prefetch, fq.out) for r in q),
            tuple(sorted(sched.inflight)),
            tuple((e.time, e.kind, e.tenant, e.data) for e in self.engine.pending_events()),
            tuple(self.blocked),
            tuple(self.left),
            tuple(sorted(self.budget.items())),
            tuple(sorted(s._requests)),
        )

    def terminal_problems(self) -> list[str]:
        s = self.sys
        out = []
        if any(self.blocked) or s._waiters:
            out.append("fault blocked forever")
        for part in s._partitions:
            for e in part.entries:
                if not e.valid:
                    out.append(f"entry {e.id} left invalid")
        if s.tenants[0].cache.orphans:
            out.append("orphan frame leaked")
        if s._requests:
            out.append("request never completed")
        return out


def _clone(w: _DropWorld) -> _DropWorld:
    # a pickle round trip is about twice as fast as deepcopy on these worlds
    return pickle.loads(pickle.dumps(w, pickle.HIGHEST_PROTOCOL))


def explore_drop_protocol(threads: int = 2, prefetches: int = 2, evictions: int = 1, ticks: int = 1) -> ExploreResult:
    """Depth-first over every interleaving of the one-page world, memoized on state."""
    res = ExploreResult()
    root = _DropWorld(threads, prefetches, evictions, ticks)
    seen: set = set()
    stack: list[tuple[_DropWorld, tuple]] = [(root, ())]
    while stack:
        w, path = stack.pop()
        k = w.key()
        if k in seen:
            continue
        seen.add(k)
        res.states += 1
        res.max_depth = max(res.max_depth, len(path))
        res.max_requests_per_entry = max(res.max_requests_per_entry, w.requests_on_entry())
        acts = w.actions()
        if not acts:
            res.terminal_states += 1
            for prob in w.terminal_problems():
                res.violations.append((path, prob))
            continue
        for i, act in enumerate(acts):
            nxt = w if i == len(acts) - 1 else _clone(w)
            res.transitions += 1
            try:
                nxt.apply(act)
            except (AssertionError, SimError) as exc:
                res.violations.append((path + (act,), repr(exc)))
                continue
            stack.append((nxt, path + (act,)))
    return res


def installed_invalid_payload(res: ExploreResult) -> bool:
    return any("invalidated request" in str(v[1]) for v in res.violations)
