"""The fault-handling data path: swap-cache lookup, memory accounting,
demand swap-in, LRU eviction and writeback, and routing of shared pages to
the global cache.

Memory accounting is a static split.  A tenant may map at most
``local_mem_pages - cache_pages`` pages (counting pages whose demand read is
in flight); the rest of its budget is the swap cache.
"""

from __future__ import annotations

import bisect
from collections import OrderedDict, deque
from dataclasses import dataclass, field, fields
from itertools import islice
from typing import Callable, Optional, TextIO

from . import engine as ev
from .alloc import ContentionTracker, EntryAllocator, HotnessTracker, LockCostModel, Partition
from .model import (
    PAGE_SIZE,
    SHARED,
    EntryState,
    FaultOnMappedPage,
    IoRequest,
    NothingEvictable,
    PageDescriptor,
    PartitionFull,
    QueueOverflow,
    RequestKind,
    Residency,
    ScenarioConfig,
    SwapEntry,
    TenantConfig,
    UnknownRequest,
    UnknownTenant,
)
from .prefetch import TenantPrefetcher
from .sched import OUT, RdmaScheduler, TimeoutDecision, _ignore

SHRINK_RETRY_NS = 10_000

CACHE_HIT = "CacheHit"
DEMAND_ISSUED = "DemandIssued"
BLOCKED = "BlockedOnInflight"
REISSUED = "ReissuedAsDemand"


@dataclass(slots=True)
class CachedPage:
    page: PageDescriptor
    locked: bool
    inserted: int
    # a swap-out of this page's data is still on the wire
    writeback: bool = False
    request: Optional[int] = None


@dataclass
class FaultOutcome:
    kind: str
    request: Optional[int] = None
    prefetches: list[int] = field(default_factory=list)
    # time the faulting thread spends before it can continue (hits only)
    stall: int = 0


class SwapCache:
    """Unmapped pages staged locally, ordered by insertion (coldest first)."""

    def __init__(self, owner: int, capacity_pages: int):
        self.owner = owner
        self.capacity = capacity_pages
        self.resident: OrderedDict[tuple[int, int], CachedPage] = OrderedDict()
        # unlocked pages with no writeback, in the order they became releasable
        self.releasable: OrderedDict[tuple[int, int], CachedPage] = OrderedDict()
        # frames still held by invalidated reads that have not come back yet
        self.orphans = 0
        self.shrink_scheduled = False
        self.peak = 0

    def __len__(self) -> int:
        return len(self.resident)

    @property
    def occupancy(self) -> int:
        return len(self.resident) + self.orphans

    def get(self, key) -> Optional[CachedPage]:
        return self.resident.get(key)

    def insert(self, cp: CachedPage) -> None:
        if self.owner != SHARED and cp.page.mapcount > 1:
            raise AssertionError(f"shared page {cp.page.key} routed to private cache {self.owner}")
        self.resident[cp.page.key] = cp
        self.settle(cp)
        if self.occupancy > self.peak:
            self.peak = self.occupancy

    def remove(self, key) -> CachedPage:
        self.releasable.pop(key, None)
        return self.resident.pop(key)

    def settle(self, cp: CachedPage) -> None:
        """Re-file ``cp`` after its lock or writeback flag changed."""
        if cp.locked or cp.writeback:
            self.releasable.pop(cp.page.key, None)
        else:
            self.releasable[cp.page.key] = cp


class LruState:
    """Two-list LRU; the most recently used page sits at the end of each dict."""

    def __init__(self) -> None:
        self.active: OrderedDict[tuple[int, int], PageDescriptor] = OrderedDict()
        self.inactive: OrderedDict[tuple[int, int], PageDescriptor] = OrderedDict()

    def __len__(self) -> int:
        return len(self.active) + len(self.inactive)

    def __contains__(self, key) -> bool:
        return key in self.active or key in self.inactive

    def get(self, key) -> Optional[PageDescriptor]:
        p = self.active.get(key)
        return p if p is not None else self.inactive.get(key)

    def items(self):
        yield from self.active.items()
        yield from self.inactive.items()

    def values(self):
        yield from self.active.values()
        yield from self.inactive.values()

    def add(self, page: PageDescriptor) -> None:
        self.inactive[page.key] = page

    def touch(self, page: PageDescriptor) -> None:
        k = page.key
        if k in self.active:
            self.active.move_to_end(k)
        elif k in self.inactive:
            del self.inactive[k]
            self.active[k] = page

    def remove(self, page: PageDescriptor) -> None:
        k = page.key
        if self.active.pop(k, None) is None:
            del self.inactive[k]

    def pop_coldest(self, n: int) -> list[PageDescriptor]:
        out: list[PageDescriptor] = []
        active, inactive = self.active, self.inactive
        while len(out) < n:
            if active and len(inactive) <= len(active):
                k, p = active.popitem(last=False)
                inactive[k] = p
                continue
            if not inactive:
                break
            out.append(inactive.popitem(last=False)[1])
        return out

    def active_head(self, n: int) -> list[PageDescriptor]:
        return list(islice(reversed(self.active.values()), n))


@dataclass
class TenantCounters:
    accesses: int = 0
    first_touches: int = 0
    faults: int = 0
    cache_hits: int = 0
    demand_ins: int = 0
    inflight_waits: int = 0
    reissued: int = 0
    demand_completed: int = 0
    evictions: int = 0
    swap_outs: int = 0
    writebacks: int = 0
    lock_path_allocs: int = 0
    reserved_path_allocs: int = 0
    alloc_latency_ns: int = 0
    cancellations: int = 0
    prefetches_issued: int = 0
    prefetches_dropped: int = 0
    prefetches_discarded: int = 0
    prefetches_delivered: int = 0
    prefetch_hits: int = 0
    prefetch_late_hits: int = 0
    prefetches_wasted: int = 0
    app_prefetches: int = 0
    cache_released: int = 0
    bytes_in: int = 0
    bytes_out: int = 0

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


class TenantState:
    def __init__(self, idx: int, cfg: TenantConfig):
        self.idx = idx
        self.cfg = cfg
        self.lru = LruState()
        self.pages: dict[int, PageDescriptor] = {}
        self.shared_pages: set[int] = set()
        self.pending_map = 0
        self.mapped_limit = cfg.local_mem_pages - cfg.cache_pages
        self.counters = TenantCounters()
        self.cache: SwapCache
        self.allocator: EntryAllocator
        self.prefetcher: TenantPrefetcher

    def page(self, p: int) -> PageDescriptor:
        d = self.pages.get(p)
        if d is None:
            d = self.pages[p] = PageDescriptor(page=p, tenant=self.idx, mapcount=2 if p in self.shared_pages else 1)
        return d


# module-level so a SwapSystem can be pickled
def _single_flow(tenant: int) -> int:
    return 0


def _own_flow(tenant: int) -> int:
    return tenant


class SwapSystem:
    """All tenants' swap state plus the scheduler that moves their pages.

    ``wake(tenant, thread, time)`` is called when a blocked thread may run again.
    """

    def __init__(
        self,
        cfg: ScenarioConfig,
        engine: ev.Engine,
        wake: Callable[[int, int, int], None] = _ignore,
        sched_trace: Optional[TextIO] = None,
    ):
        self.cfg = cfg
        self.engine = engine
        self.wake = wake
        self.shared = cfg.mode == "shared-baseline"
        acfg = cfg.allocator
        self.lock_model = LockCostModel.fit(acfg.base_ns, acfg.calibration)

        total_remote = sum(t.remote_partition_pages for t in cfg.tenants)
        total_cache = sum(t.cache_pages for t in cfg.tenants)
        self.global_cache = SwapCache(SHARED, total_cache if self.shared else max(t.cache_pages for t in cfg.tenants))
        gpart = Partition(SHARED, total_remote, 0, acfg.cluster_size)
        self.global_alloc = self._allocator(gpart, adaptive=False, removal=1.0)
        self._partitions: list[Partition] = [gpart]
        next_id = total_remote
        self.global_prefetcher = (
            TenantPrefetcher(cfg.prefetch.shared_policy, cfg.prefetch) if self.shared else None
        )

        self.tenants: list[TenantState] = []
        for i, tc in enumerate(cfg.tenants):
            ts = TenantState(i, tc)
            if self.shared:
                ts.cache = self.global_cache
                ts.allocator = self.global_alloc
                ts.prefetcher = self.global_prefetcher
            else:
                ts.cache = SwapCache(i, tc.cache_pages)
                part = Partition(i, tc.remote_partition_pages, next_id, acfg.cluster_size)
                next_id += tc.remote_partition_pages
                self._partitions.append(part)
                ts.allocator = self._allocator(part, tc.allocator == "adaptive", tc.reservation_removal_fraction)
                ts.prefetcher = TenantPrefetcher(
                    tc.prefetcher,
                    cfg.prefetch,
                    tc.profile,
                    tc.prefetch_forward_threshold,
                    tc.prefetch_forward_window,
                )
            self.tenants.append(ts)
        self._part_starts = [p.first_id for p in self._partitions]

        if self.shared:
            weights = {0: 1.0}
            flow_of = _single_flow
        else:
            weights = {i: tc.bandwidth_weight for i, tc in enumerate(cfg.tenants)}
            flow_of = _own_flow
        self.sched = RdmaScheduler(
            engine,
            cfg.fabric,
            cfg.scheduler,
            weights,
            flow_of,
            self.entry,
            deliver=self._deliver,
            drop=self._on_drop,
            discard=self._on_discard,
            tenants=list(range(len(cfg.tenants))),
            trace=sched_trace,
        )
        self._next_req = 0
        self._requests: dict[int, IoRequest] = {}
        # per scheduler queue: ids of requests that found it full, oldest first
        self._overflow: dict[tuple, deque[int]] = {}
        self._waiters: dict[tuple[int, int], list[tuple[int, bool]]] = {}
        self._timeouts_armed: set[tuple[int, int]] = set()
        engine.on(ev.ISSUE_DEMAND, self._on_issue_demand)
        engine.on(ev.APP_PREFETCH, self._on_app_prefetch)
        engine.on(ev.BLOCK_TIMEOUT, self._on_block_timeout)
        engine.on(ev.CACHE_SHRINK, self._on_cache_shrink)
        engine.on(ev.SCAN_TICK, self._on_scan_tick)

    def _allocator(self, part: Partition, adaptive: bool, removal: float) -> EntryAllocator:
        acfg = self.cfg.allocator
        return EntryAllocator(
            part,
            self.lock_model,
            ContentionTracker(acfg.contention_window_ns),
            adaptive=adaptive,
            keep_clean_entries=acfg.keep_clean_entries,
            keep_clean_threshold=acfg.keep_clean_threshold,
            removal_fraction=removal,
            hotness=HotnessTracker(acfg.hot_sets, acfg.scan_size),
        )

    # --- lookups ------------------------------------------------------------

    def entry(self, entry_id: int) -> SwapEntry:
        i = bisect.bisect_right(self._part_starts, entry_id) - 1
        return self._partitions[i].entry(entry_id)

    def tenant(self, t: int) -> TenantState:
        if not 0 <= t < len(self.tenants):
            raise UnknownTenant(t)
        return self.tenants[t]

    def cache_for(self, page: PageDescriptor) -> SwapCache:
        if self.shared or page.mapcount > 1:
            return self.global_cache
        return self.tenants[page.tenant].cache

    def allocator_for(self, page: PageDescriptor) -> EntryAllocator:
        if self.shared or page.mapcount > 1:
            return self.global_alloc
        return self.tenants[page.tenant].allocator

    def caches(self) -> list[SwapCache]:
        if self.shared:
            return [self.global_cache]
        return [t.cache for t in self.tenants] + [self.global_cache]

    def _context(self, ts: TenantState, thread: int) -> tuple[int, int]:
        return (ts.idx, thread % ts.cfg.cores)

    # --- access path --------------------------------------------------------

    def access(self, tenant: int, thread: int, page_no: int, write: bool, now: int) -> Optional[int]:
        """Run one memory access.  Returns the stall in ns, or None if the thread blocked."""
        ts = self.tenant(tenant)
        page = ts.page(page_no)
        ts.counters.accesses += 1
        page.last_access = now
        res = page.residency
        if res is Residency.MAPPED:
            ts.lru.touch(page)
            if write:
                page.dirty = True
            return 0
        if res is Residency.UNTOUCHED:
            # zero-filled on first touch: no remote data, so not a swap fault
            ts.counters.first_touches += 1
            delay = self.make_room(ts, 1, now, thread)
            page.dirty = True
            self._map(ts, page)
            return delay + self.cfg.fault_overhead_ns
        out = self.handle_fault(tenant, thread, page_no, now, write)
        if out.kind == CACHE_HIT:
            return out.stall
        return None

    def handle_fault(self, tenant: int, thread: int, page_no: int, now: int, write: bool = False) -> FaultOutcome:
        ts = self.tenant(tenant)
        page = ts.page(page_no)
        if page.residency is Residency.MAPPED:
            raise FaultOnMappedPage(f"tenant {tenant} page {page_no}")
        c = ts.counters
        c.faults += 1
        key = page.key
        cache = self.cache_for(page)
        cp = cache.get(key)
        cand = self._candidate_fn(ts)

        if cp is not None and not cp.locked:
            c.cache_hits += 1
            if page.prefetched:
                c.prefetch_hits += 1
                self.sched.record_timeliness(tenant, now - page.prefetch_enqueued, now - page.prefetch_arrival)
                page.prefetched = False
                page.prefetch_enqueued = page.prefetch_arrival = None
            decision = ts.prefetcher.on_fault(thread, page_no, False, cand)
            cache.remove(key)
            delay = self.make_room(ts, 1, now, thread)
            self._map(ts, page, write)
            self._issue_decision(ts, decision, now + delay)
            return FaultOutcome(CACHE_HIT, stall=delay + self.cfg.fault_overhead_ns)

        if cp is not None:
            entry = self.entry(page.entry)
            decision = self.sched.check_inflight_timeout(entry, tenant, now)
            if decision is TimeoutDecision.REISSUE_DEMAND:
                c.demand_ins += 1
                req = self._reissue(ts, page, cp, now, thread)
                self._waiters.setdefault(key, []).append((thread, write))
                return FaultOutcome(REISSUED, req)
            c.inflight_waits += 1
            waiters = self._waiters.setdefault(key, [])
            if entry.timestamp is not None:
                if not waiters:
                    # first touch of a prefetch that has not landed yet
                    self.sched.record_timeliness(tenant, now - entry.timestamp)
                self._arm_timeout(ts, page, entry, now)
            waiters.append((thread, write))
            return FaultOutcome(BLOCKED, cp.request)

        # miss
        c.demand_ins += 1
        decision = ts.prefetcher.on_fault(thread, page_no, True, cand)
        delay = self.make_room(ts, 1, now, thread)
        ts.pending_map += 1
        req = self._new_request(RequestKind.DEMAND_IN, ts.idx, page)
        cache.insert(CachedPage(page, True, now, request=req.id))
        page.residency = Residency.CACHED
        self._shrink_if_needed(cache, now)
        self._waiters.setdefault(key, []).append((thread, write))
        if delay > 0:
            self.engine.schedule(now + delay, ev.ISSUE_DEMAND, ts.idx, req.id)
        else:
            self._enqueue(req, now)
        ids = self._issue_decision(ts, decision, now + delay)
        return FaultOutcome(DEMAND_ISSUED, req.id, ids)

    def _candidate_fn(self, ts: TenantState) -> Callable[[int], bool]:
        pages = ts.pages

        def cand(p: int) -> bool:
            d = pages.get(p)
            return d is not None and d.residency is Residency.REMOTE

        return cand

    def _map(self, ts: TenantState, page: PageDescriptor, write: bool = False) -> None:
        page.residency = Residency.MAPPED
        self.allocator_for(page).on_map(page)
        if write:
            page.dirty = True
        ts.lru.add(page)

    # --- requests -----------------------------------------------------------

    def _new_request(self, kind: RequestKind, tenant: int, page: PageDescriptor, entry: Optional[int] = None) -> IoRequest:
        req = IoRequest(self._next_req, kind, tenant, page.page, page.entry if entry is None else entry)
        self._next_req += 1
        self._requests[req.id] = req
        return req

    def _enqueue(self, req: IoRequest, now: int) -> bool:
        """Queue a demand read or writeback; a full queue parks it until a completion."""
        key = self.sched.queue_key(req)
        parked = self._overflow.get(key)
        if not parked and self.sched.has_room(req):
            self.sched.enqueue(req, now)
            return True
        self._overflow.setdefault(key, deque()).append(req.id)
        return False

    def _drain_overflow(self, now: int) -> None:
        for key in list(self._overflow):
            parked = self._overflow[key]
            while parked:
                req = self._requests.get(parked[0])
                if req is not None:
                    if not self.sched.has_room(req):
                        break
                    self.sched.enqueue(req, now)
                parked.popleft()
            if not parked:
                del self._overflow[key]

    def _on_issue_demand(self, e: ev.SimEvent) -> None:
        self._enqueue(self._requests[e.data], e.time)

    def _issue_decision(self, ts: TenantState, decision, at: int) -> list[int]:
        ids = self.issue_prefetches(ts, decision.kernel, at) if decision.kernel else []
        if decision.app:
            ts.counters.app_prefetches += len(decision.app)
            self.engine.schedule(
                at + self.cfg.prefetch.forward_cost_ns, ev.APP_PREFETCH, ts.idx, tuple(decision.app)
            )
        return ids

    def _on_app_prefetch(self, e: ev.SimEvent) -> None:
        self.issue_prefetches(self.tenants[e.tenant], e.data, e.time)

    def issue_prefetches(self, ts: TenantState, pages, now: int) -> list[int]:
        ids = []
        for p in pages:
            page = ts.pages.get(p)
            if page is None or page.residency is not Residency.REMOTE:
                continue
            entry = self.entry(page.entry)
            if not entry.valid:
                continue  # an invalidated read of this entry is still outstanding
            cache = self.cache_for(page)
            if cache.occupancy >= cache.capacity:
                self.shrink_cache(cache, now, need=1)
                if cache.occupancy >= cache.capacity:
                    break
            req = self._new_request(RequestKind.PREFETCH_IN, ts.idx, page)
            try:
                self.sched.enqueue(req, now)
            except QueueOverflow:
                del self._requests[req.id]
                break
            page.prefetch_enqueued = now
            cache.insert(CachedPage(page, True, now, request=req.id))
            page.residency = Residency.CACHED
            ts.counters.prefetches_issued += 1
            ids.append(req.id)
        return ids

    def _reissue(self, ts: TenantState, page: PageDescriptor, cp: CachedPage, now: int, thread: int) -> int:
        """Replace an invalidated in-flight prefetch with a demand read into a fresh frame."""
        cache = self.cache_for(page)
        cache.orphans += 1
        # the page now waits on a demand read, which carries no timestamp, even
        # if reclaim delays its enqueue
        self.entry(page.entry).timestamp = None
        delay = self.make_room(ts, 1, now, thread)
        ts.pending_map += 1
        req = self._new_request(RequestKind.DEMAND_IN, ts.idx, page)
        cache.remove(page.key)
        cache.insert(CachedPage(page, True, now, request=req.id))
        page.prefetched = False
        if delay > 0:
            self.engine.schedule(now + delay, ev.ISSUE_DEMAND, ts.idx, req.id)
        else:
            self._enqueue(req, now)
        return req.id

    def _arm_timeout(self, ts: TenantState, page: PageDescriptor, entry: SwapEntry, now: int) -> None:
        if self.sched.mode != "canvas" or page.key in self._timeouts_armed:
            return
        self._timeouts_armed.add(page.key)
        at = max(now, entry.timestamp + self.sched.reissue_timeout(ts.idx) + 1)
        self.engine.schedule(at, ev.BLOCK_TIMEOUT, ts.idx, page.page)

    def _on_block_timeout(self, e: ev.SimEvent) -> None:
        ts = self.tenants[e.tenant]
        page = ts.pages[e.data]
        key = page.key
        self._timeouts_armed.discard(key)
        if key not in self._waiters:
            return
        cp = self.cache_for(page).get(key)
        if cp is None or not cp.locked:
            return
        entry = self.entry(page.entry)
        if entry.timestamp is None:
            return  # now waiting on a demand read
        if self.sched.check_inflight_timeout(entry, ts.idx, e.time) is TimeoutDecision.REISSUE_DEMAND:
            ts.counters.reissued += 1
            thread = self._waiters[key][0][0]
            self._reissue(ts, page, cp, e.time, thread)
        else:
            self._arm_timeout(ts, page, entry, e.time)

    # --- completions --------------------------------------------------------

    def _deliver(self, req: IoRequest, now: int) -> None:
        self._drain_overflow(now)
        ts = self.tenants[req.tenant]
        page = ts.pages[req.page]
        del self._requests[req.id]
        if req.kind is RequestKind.SWAP_OUT:
            ts.counters.bytes_out += req.size_bytes
            cp = self.cache_for(page).get(page.key)
            if cp is not None and cp.writeback and cp.request == req.id:
                cp.writeback = False
                self.cache_for(page).settle(cp)
                cp.request = None
                self._shrink_if_needed(self.cache_for(page), now)
            return
        ts.counters.bytes_in += req.size_bytes
        self.complete_swap_in(req, now)

    def complete_swap_in(self, req: IoRequest, now: int) -> None:
        ts = self.tenants[req.tenant]
        page = ts.pages[req.page]
        cache = self.cache_for(page)
        cp = cache.get(page.key)
        if cp is None or cp.request != req.id or not cp.locked:
            raise UnknownRequest(req.id)
        cp.locked = False
        cp.request = None
        cache.settle(cp)
        c = ts.counters
        if req.kind is RequestKind.DEMAND_IN:
            c.demand_completed += 1
            ts.pending_map -= 1
            cache.remove(page.key)
            self._map(ts, page)
            self._wake_waiters(ts, page, now, 0)
            return
        c.prefetches_delivered += 1
        waiters = self._waiters.get(page.key)
        if waiters:
            c.prefetch_late_hits += 1
            thread = waiters[0][0]
            # take the frame first so reclaim cannot release it under us
            cache.remove(page.key)
            delay = self.make_room(ts, 1, now, thread)
            self._map(ts, page)
            self._wake_waiters(ts, page, now, delay)
        else:
            page.prefetched = True
            page.prefetch_arrival = now
            self._shrink_if_needed(cache, now)

    def _wake_waiters(self, ts: TenantState, page: PageDescriptor, now: int, delay: int) -> None:
        waiters = self._waiters.pop(page.key, ())
        at = now + delay + self.cfg.fault_overhead_ns
        for thread, write in waiters:
            if write:
                page.dirty = True
            self.wake(ts.idx, thread, at)

    def _on_drop(self, req: IoRequest, now: int) -> None:
        """A prefetch was dropped at the queue head before reaching the wire."""
        ts = self.tenants[req.tenant]
        page = ts.pages[req.page]
        del self._requests[req.id]
        ts.counters.prefetches_dropped += 1
        cache = self.cache_for(page)
        cp = cache.remove(page.key)
        assert cp.request == req.id
        page.residency = Residency.REMOTE
        waiters = self._waiters.get(page.key)
        if waiters:
            ts.counters.reissued += 1
            delay = self.make_room(ts, 1, now, waiters[0][0])
            ts.pending_map += 1
            dreq = self._new_request(RequestKind.DEMAND_IN, ts.idx, page)
            cache.insert(CachedPage(page, True, now, request=dreq.id))
            page.residency = Residency.CACHED
            if delay > 0:
                self.engine.schedule(now + delay, ev.ISSUE_DEMAND, ts.idx, dreq.id)
            else:
                self._enqueue(dreq, now)

    def _on_discard(self, req: IoRequest, now: int) -> None:
        """An invalidated prefetch came back (or was found at dispatch): free its orphan frame."""
        ts = self.tenants[req.tenant]
        page = ts.pages[req.page]
        del self._requests[req.id]
        ts.counters.prefetches_discarded += 1
        self.cache_for(page).orphans -= 1

    # --- eviction -----------------------------------------------------------

    def make_room(self, ts: TenantState, n: int, now: int, thread: int) -> int:
        """Evict until ``n`` more pages fit; returns the reclaim stall charged to the caller."""
        over = len(ts.lru) + ts.pending_map + n - ts.mapped_limit
        if over <= 0:
            return 0
        # each faulting context reclaims only its own overshoot, so reclaim (and
        # allocator contention) spreads across contexts like direct reclaim
        victims = ts.lru.pop_coldest(over)
        delay = 0
        for v in victims:
            delay += self._evict_one(ts, v, now + delay, thread)
        if victims:
            delay += self._writeback_throttle(self.cache_for(victims[-1]), ts.idx)
        return delay

    def _writeback_throttle(self, cache: SwapCache, tenant: int) -> int:
        """Stall for reclaim that outruns writeback.

        Pages under writeback cannot be released, so a cache held over its
        bound by them makes the reclaimer wait roughly until enough writes
        drain at the flow's share of the outbound link.
        """
        excess = cache.occupancy - cache.capacity
        if excess <= 0:
            return 0
        rate = self.sched.allocated_rate(self.sched.flow_of(tenant), OUT)
        return int(excess * PAGE_SIZE * 1e9 / rate)

    def evict(self, tenant: int, n_pages: int, now: int, thread: int = 0) -> list[int]:
        ts = self.tenant(tenant)
        victims = ts.lru.pop_coldest(n_pages)
        if n_pages > 0 and not victims:
            raise NothingEvictable(f"tenant {tenant} has no mapped pages")
        t = now
        for v in victims:
            t += self._evict_one(ts, v, t, thread)
        return [v.page for v in victims]

    def _evict_one(self, ts: TenantState, page: PageDescriptor, now: int, thread: int) -> int:
        alloc = self.allocator_for(page)
        cache = self.cache_for(page)
        c = ts.counters
        c.evictions += 1
        c.swap_outs += 1
        needs_write = page.dirty or page.reserved_entry is None
        try:
            eid, took, lat = alloc.swap_out_entry(page, now, self._context(ts, thread))
        except PartitionFull:
            if not (alloc.adaptive and alloc.emergency_cancel(ts.lru)):
                raise
            c.cancellations += 1
            eid, took, lat = alloc.swap_out_entry(page, now, self._context(ts, thread))
        entry = self.entry(eid)
        entry.page = page.key
        page.entry = eid
        page.residency = Residency.CACHED
        if took:
            c.lock_path_allocs += 1
            c.alloc_latency_ns += lat
        else:
            c.reserved_path_allocs += 1
        cp = CachedPage(page, False, now)
        if needs_write:
            c.writebacks += 1
            req = self._new_request(RequestKind.SWAP_OUT, ts.idx, page, eid)
            cp.writeback = True
            cp.request = req.id
            page.dirty = False
            if not self._enqueue(req, self.engine.now):
                # writeback throttling: the reclaimer waits about one page time on the wire
                lat += self.sched.links[OUT].serialization(PAGE_SIZE)
        cache.insert(cp)
        self._shrink_if_needed(cache, now)
        return lat

    def _shrink_if_needed(self, cache: SwapCache, now: int) -> None:
        if cache.occupancy > cache.capacity:
            self.shrink_cache(cache, now)

    def shrink_cache(self, cache: SwapCache, now: int, need: int = 0) -> int:
        """Release up to ``cache_shrink_batch`` unlocked pages from the cold end.

        ``need`` asks for that many free slots on top of restoring the capacity bound.
        """
        over = cache.occupancy + need - cache.capacity
        if over <= 0:
            return 0
        want = min(over, self.cfg.cache_shrink_batch)
        picked = list(islice(cache.releasable.values(), want))
        for cp in picked:
            page = cp.page
            cache.remove(page.key)
            page.residency = Residency.REMOTE
            ts = self.tenants[page.tenant]
            ts.counters.cache_released += 1
            if page.prefetched:
                ts.counters.prefetches_wasted += 1
                page.prefetched = False
                page.prefetch_enqueued = page.prefetch_arrival = None
        if cache.occupancy > cache.capacity and not cache.shrink_scheduled:
            cache.shrink_scheduled = True
            self.engine.schedule(now + SHRINK_RETRY_NS, ev.CACHE_SHRINK, cache.owner, None)
        return len(picked)

    def _on_cache_shrink(self, e: ev.SimEvent) -> None:
        cache = self.global_cache if e.tenant == SHARED else self.tenants[e.tenant].cache
        cache.shrink_scheduled = False
        self.shrink_cache(cache, e.time)

    # --- hotness scans ------------------------------------------------------

    def scan_tick(self, tenant: int, now: int) -> int:
        ts = self.tenant(tenant)
        head = ts.lru.active_head(self.cfg.allocator.scan_size)
        n = ts.allocator.scan_and_cancel(head, ts.lru, now)
        ts.counters.cancellations += n
        return n

    def _on_scan_tick(self, e: ev.SimEvent) -> None:
        self.scan_tick(e.tenant, e.time)
        self.engine.schedule(e.time + self.cfg.allocator.scan_period_ns, ev.SCAN_TICK, e.tenant, None)

    def start_scans(self) -> None:
        if self.shared:
            return
        for ts in self.tenants:
            if ts.allocator.adaptive:
                self.engine.schedule(self.cfg.allocator.scan_period_ns, ev.SCAN_TICK, ts.idx, None)

    # --- invariants ---------------------------------------------------------

    def check_invariants(self) -> list[str]:
        problems = []
        for ts in self.tenants:
            if len(ts.lru) > ts.mapped_limit:
                problems.append(f"tenant {ts.idx}: {len(ts.lru)} mapped > limit {ts.mapped_limit}")
        parts = self._partitions
        for p in parts:
            counts = p.counts()
            if sum(counts.values()) != p.capacity:
                problems.append(f"partition {p.owner}: entry conservation broken")
            if p.free_count != counts[EntryState.FREE]:
                problems.append(f"partition {p.owner}: free count drift")
        for cache in self.caches():
            if cache.owner != SHARED:
                for cp in cache.resident.values():
                    if cp.page.mapcount > 1:
                        problems.append(f"shared page {cp.page.key} in private cache")
            if cache.orphans < 0:
                problems.append(f"cache {cache.owner}: negative orphan count")
        for ts in self.tenants:
            c = ts.counters
            if c.faults != c.cache_hits + c.inflight_waits + c.demand_ins:
                problems.append(f"tenant {ts.idx}: fault classification does not add up")
            if c.prefetch_hits > c.prefetches_issued - c.prefetches_dropped:
                problems.append(f"tenant {ts.idx}: more prefetch hits than prefetches sent")
        return problems
