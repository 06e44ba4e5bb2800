import pytest

from farswap import engine as ev
from farswap.engine import Engine
from farswap.model import SHARED, EntryState, FaultOnMappedPage, Residency, validate_config
from farswap.swap import BLOCKED, CACHE_HIT, DEMAND_ISSUED, REISSUED, SwapSystem


class World:
    """One tenant with 56 mappable frames and an 8-page swap cache."""

    def __init__(self, allocator="adaptive", prefetcher="none", shared=(), mode="isolated", **sched):
        tenant = {
            "name": "a",
            "local_mem_pages": 64,
            "remote_partition_pages": 256,
            "swap_cache_bytes": 8 * 4096,
            "allocator": allocator,
            "prefetcher": prefetcher,
        }
        self.cfg = validate_config(
            {
                "tenants": [tenant],
                "mode": mode,
                "scheduler": sched,
                "allocator": {"scan_period_ns": 10**12},
            }
        )
        self.engine = Engine()
        self.woken = []
        self.sys = SwapSystem(self.cfg, self.engine, lambda t, th, at: self.woken.append((th, at)))
        self.ts = self.sys.tenants[0]
        self.ts.shared_pages.update(shared)

    def run(self, until=None):
        self.engine.run_until(until if until is not None else self.engine.now + 10**9)

    def touch(self, *pages, write=False):
        for p in pages:
            self.sys.access(0, 0, p, write, self.engine.now)

    def to_remote(self, *pages):
        """Map, evict, write back and release ``pages`` so they live only remotely."""
        self.touch(*pages)
        for p in pages:
            page = self.ts.pages[p]
            self.ts.lru.remove(page)
            self.sys._evict_one(self.ts, page, self.engine.now, 0)
        self.run()
        for p in pages:
            cache = self.sys.cache_for(self.ts.pages[p])
            if cache.get((0, p)) is not None:
                cache.remove((0, p))
                self.ts.pages[p].residency = Residency.REMOTE
        assert all(self.ts.pages[p].residency is Residency.REMOTE for p in pages)


def test_first_touch_is_not_a_fault():
    w = World()
    assert w.sys.access(0, 0, 5, False, 0) is not None
    assert w.ts.counters.faults == 0
    assert w.ts.counters.first_touches == 1
    with pytest.raises(FaultOnMappedPage):
        w.sys.handle_fault(0, 0, 5, 0)


def test_cache_hit_shrinks_occupancy():
    w = World()
    w.touch(1)
    page = w.ts.pages[1]
    w.ts.lru.remove(page)
    w.sys._evict_one(w.ts, page, 0, 0)
    w.run()
    before = w.ts.cache.occupancy
    out = w.sys.handle_fault(0, 0, 1, w.engine.now)
    assert out.kind == CACHE_HIT
    assert w.ts.cache.occupancy == before - 1
    assert page.residency is Residency.MAPPED


def test_cold_miss_issues_demand():
    w = World(prefetcher="kernel")
    w.to_remote(1, 2, 3)
    out = w.sys.handle_fault(0, 0, 1, w.engine.now)
    assert out.kind == DEMAND_ISSUED
    assert out.request is not None
    assert isinstance(out.prefetches, list)
    w.run()
    assert w.ts.pages[1].residency is Residency.MAPPED
    assert w.woken


def test_fault_on_fresh_prefetch_blocks():
    w = World(timeliness_bootstrap_ns=70_000)
    w.to_remote(7)
    now = w.engine.now
    w.sys.issue_prefetches(w.ts, [7], now)
    out = w.sys.handle_fault(0, 0, 7, now + 1_000)
    assert out.kind == BLOCKED
    w.run()
    assert w.ts.pages[7].residency is Residency.MAPPED
    assert w.ts.counters.prefetch_late_hits == 1


def test_evict_clean_reserved_page_has_no_writeback():
    w = World()
    w.to_remote(3)
    w.sys.handle_fault(0, 0, 3, w.engine.now)
    w.run()
    page = w.ts.pages[3]
    assert not page.dirty and page.reserved_entry is not None
    writes = w.ts.counters.writebacks
    w.ts.lru.remove(page)
    w.sys._evict_one(w.ts, page, w.engine.now, 0)
    assert w.ts.counters.writebacks == writes
    assert w.ts.cache.get(page.key) is not None


def test_evict_dirty_page_writes_back():
    w = World()
    w.touch(4, write=True)
    out_before = w.sys.sched.queued("out")
    w.sys.evict(0, 1, w.engine.now)
    assert w.ts.counters.writebacks == 1
    assert w.ts.pages[4].entry is not None
    assert w.sys.sched.queued("out") == out_before + 1


def test_shared_page_goes_to_global_cache():
    w = World(shared={9})
    w.touch(9)
    w.sys.evict(0, 1, w.engine.now)
    assert w.sys.global_cache.get((0, 9)) is not None
    assert w.ts.cache.get((0, 9)) is None
    assert w.sys.global_cache.owner == SHARED


def test_demand_completion_frees_entry_without_reservation():
    w = World(allocator="baseline")
    w.to_remote(2)
    eid = w.ts.pages[2].entry
    w.sys.handle_fault(0, 0, 2, w.engine.now)
    w.run()
    assert w.sys.entry(eid).state is EntryState.FREE


def test_adaptive_completion_keeps_entry_bound():
    w = World()
    w.to_remote(2)
    eid = w.ts.pages[2].entry
    w.sys.handle_fault(0, 0, 2, w.engine.now)
    w.run()
    assert w.sys.entry(eid).state is EntryState.RESERVED
    assert w.ts.pages[2].reserved_entry == eid


def _fill_cache(w, n, locked=False):
    """Put ``n`` released-ready pages straight into the private cache."""
    from farswap.swap import CachedPage

    for i in range(n):
        page = w.ts.page(1000 + i)
        page.residency = Residency.CACHED
        w.ts.cache.insert(CachedPage(page, locked, 0))


def test_shrink_at_capacity_releases_nothing():
    w = World()
    _fill_cache(w, 8)
    assert w.sys.shrink_cache(w.ts.cache, 0) == 0


def test_shrink_restores_bound_exactly():
    w = World()
    _fill_cache(w, 13)
    assert w.sys.shrink_cache(w.ts.cache, 0) == 5
    assert w.ts.cache.occupancy == 8


def test_shrink_with_all_locked_schedules_retry():
    w = World()
    _fill_cache(w, 12, locked=True)
    assert w.sys.shrink_cache(w.ts.cache, 0) == 0
    assert w.ts.cache.shrink_scheduled
    kinds = [e.kind for _, _, e in w.engine._heap]
    assert ev.CACHE_SHRINK in kinds


def test_timeliness_sample_from_scripted_access():
    w = World()
    w.to_remote(6)
    w.sys.issue_prefetches(w.ts, [6], w.engine.now)
    w.run()
    page = w.ts.pages[6]
    arrived = page.prefetch_arrival
    enq = page.prefetch_enqueued
    est = w.sys.sched.timeliness[0]
    out = w.sys.handle_fault(0, 0, 6, arrived + 30_000)
    assert out.kind == CACHE_HIT
    assert est.since_arrival[-1] == 30_000
    assert est.samples[-1] == arrived + 30_000 - enq


def test_timeout_reissues_once_and_discards_stale_payload():
    # regression: a second timeout on the same page used to reissue twice
    w = World(reissue_timeout_ns=1_000)
    w.to_remote(*range(6))
    now = w.engine.now
    assert len(w.sys.issue_prefetches(w.ts, list(range(6)), now)) == 6
    kinds = [w.sys.handle_fault(0, 0, 5, now + 5_000).kind]
    kinds.append(w.sys.handle_fault(0, 1, 5, now + 6_000).kind)
    assert kinds[0] == REISSUED
    assert kinds[1] == BLOCKED
    w.run()
    c = w.ts.counters
    assert w.ts.pages[5].residency is Residency.MAPPED
    assert w.sys.check_invariants() == []
    assert w.ts.cache.orphans == 0
    assert c.demand_ins == 1


def test_full_queue_parks_instead_of_raising():
    w = World()
    w.cfg.fabric.queue_depth = 2
    w.sys.sched.fabric.queue_depth = 2
    w.touch(*range(10), write=True)
    w.sys.evict(0, 10, w.engine.now)
    assert w.sys._overflow
    w.run()
    assert not w.sys._overflow
    assert w.ts.counters.bytes_out == 10 * 4096


def test_invariants_clean_after_mixed_run():
    w = World(prefetcher="leap")
    w.to_remote(*range(40))
    t = w.engine.now
    for i, p in enumerate(range(0, 40, 3)):
        w.sys.access(0, i % 4, p, i % 2 == 0, t + i * 2_000)
        w.run(t + i * 2_000 + 1_000)
    w.run()
    assert w.sys.check_invariants() == []


def test_armed_timeout_after_fault_path_reissue_is_noop():
    w = World(reissue_timeout_ns=1_000)
    w.to_remote(*range(6))
    now = w.engine.now
    w.sys.issue_prefetches(w.ts, list(range(6)), now)
    assert w.sys.handle_fault(0, 0, 5, now + 500).kind == BLOCKED
    assert w.sys.handle_fault(0, 1, 5, now + 2_000).kind == REISSUED
    w.run()
    assert w.sys.sched.stats.reissued[0] == 1
    assert w.sys.check_invariants() == []
    assert w.ts.pages[5].residency is Residency.MAPPED
    assert len(w.woken) == 2
