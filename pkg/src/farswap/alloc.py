"""Swap-entry allocation.

Two allocation paths exist.  The lock path takes the partition lock and
searches the free list (cluster-local first), paying a contention-dependent
latency.  The reserved path reuses the entry id remembered on the page and
touches no shared state at all.

Reservations are cancelled for hot pages once a tenant's remote usage crosses
``reservation_removal_fraction`` of its partition.
"""

from __future__ import annotations

import bisect
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import least_squares

from .metrics import LatencyHistogram
from .model import (
    EntryState,
    IllegalTransition,
    PageDescriptor,
    PageState,
    PartitionFull,
    SwapEntry,
)


class CountingLock:
    """A mutex that counts acquisitions (used to prove the fast path is lock-free)."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.acquisitions = 0

    def __enter__(self) -> "CountingLock":
        self._lock.acquire()
        self.acquisitions += 1
        return self

    def __exit__(self, *exc) -> None:
        self._lock.release()

    # copies (deepcopy or pickle) get a fresh mutex and keep the count
    def __getstate__(self) -> dict:
        return {"acquisitions": self.acquisitions}

    def __setstate__(self, state: dict) -> None:
        self._lock = threading.Lock()
        self.acquisitions = state["acquisitions"]


class Partition:
    """A tenant's (or the shared) range of remote swap entries."""

    def __init__(self, owner: int, capacity: int, first_id: int = 0, cluster_size: int = 256):
        if capacity <= 0:
            raise ValueError("partition capacity must be > 0")
        self.owner = owner
        self.capacity = capacity
        self.first_id = first_id
        self.cluster_size = cluster_size
        self.entries = [SwapEntry(first_id + i, owner) for i in range(capacity)]
        n_clusters = (capacity + cluster_size - 1) // cluster_size
        # per-cluster stacks, popped from the end so the lowest id comes first
        self._free: list[list[int]] = []
        for c in range(n_clusters):
            lo = c * cluster_size
            hi = min(capacity, lo + cluster_size)
            self._free.append(list(range(hi - 1, lo - 1, -1)))
        self._nonempty = list(range(n_clusters))
        self._cursor: dict[object, int] = {}
        self.free_count = capacity
        self.lock = CountingLock()

    def __contains__(self, entry_id: int) -> bool:
        return self.first_id <= entry_id < self.first_id + self.capacity

    def entry(self, entry_id: int) -> SwapEntry:
        return self.entries[entry_id - self.first_id]

    def usage(self) -> int:
        """Reserved plus occupied entries."""
        return self.capacity - self.free_count

    def counts(self) -> dict[EntryState, int]:
        out = {s: 0 for s in EntryState}
        for e in self.entries:
            out[e.state] += 1
        return out

    def alloc(self, context: object = 0) -> SwapEntry:
        """Lock-path allocation; the caller charges the latency."""
        with self.lock:
            c = self._cursor.get(context)
            if c is None or not self._free[c]:
                if not self._nonempty:
                    raise PartitionFull(f"partition {self.owner} has no free entries")
                c = self._nonempty[0]
                self._cursor[context] = c
            idx = self._free[c].pop()
            if not self._free[c]:
                self._nonempty.pop(bisect.bisect_left(self._nonempty, c))
            self.free_count -= 1
            e = self.entries[idx]
            e.state = EntryState.OCCUPIED
            e.timestamp = None
            return e

    def free(self, entry: SwapEntry) -> None:
        with self.lock:
            if entry.state is EntryState.FREE:
                raise IllegalTransition(f"double free of entry {entry.id}")
            idx = entry.id - self.first_id
            c = idx // self.cluster_size
            if not self._free[c]:
                bisect.insort(self._nonempty, c)
            self._free[c].append(idx)
            self.free_count += 1
            entry.state = EntryState.FREE
            entry.timestamp = None
            entry.page = None


# --- lock cost ----------------------------------------------------------------


@dataclass
class LockCostModel:
    """Per-allocation latency L(c) = a + b * c**gamma for c contending contexts."""

    a: float
    b: float
    gamma: float

    @classmethod
    def fit(cls, base_ns: float, points: Sequence[Sequence[float]]) -> "LockCostModel":
        xs = np.array([1.0] + [float(c) for c, _ in points])
        ys = np.array([float(base_ns)] + [float(y) for _, y in points])

        def resid(p):
            a, b, g = p
            return (a + b * xs**g - ys) / ys

        sol = least_squares(
            resid,
            x0=(base_ns * 0.5, base_ns * 0.5, 2.0),
            bounds=([-np.inf, 1e-12, 0.1], [np.inf, np.inf, 8.0]),
            xtol=1e-14,
            ftol=1e-14,
        )
        a, b, g = sol.x
        return cls(float(a), float(b), float(g))

    def latency(self, contenders: int) -> int:
        c = max(1, contenders)
        return max(1, int(round(self.a + self.b * c**self.gamma)))


class ContentionTracker:
    """Counts contexts whose allocation interval overlaps a trailing window."""

    def __init__(self, window_ns: int):
        self.window = window_ns
        self._recent: deque[tuple[int, int, object]] = deque()

    def contenders(self, context: object, now: int) -> int:
        lo = now - self.window
        recent = self._recent
        while recent and recent[0][1] < lo:
            recent.popleft()
        others = {ctx for start, end, ctx in recent if ctx != context and end >= lo and start <= now}
        return 1 + len(others)

    def record(self, context: object, start: int, latency: int) -> None:
        self._recent.append((start, start + latency, context))


# --- page FSM -----------------------------------------------------------------


class FsmEvent(str, Enum):
    FIRST_SWAP_OUT = "FirstSwapOut"
    SWAP_IN = "SwapIn"
    BECAME_HOT = "BecameHot"
    BECAME_COLD = "BecameCold"
    RESERVATION_CANCELLED = "ReservationCancelled"
    SWAP_OUT_RESERVED = "SwapOutReserved"


S = PageState
E = FsmEvent
_TRANSITIONS: dict[tuple[PageState, FsmEvent], PageState] = {
    (S.COLD_NO_RES, E.FIRST_SWAP_OUT): S.SWAPPED_OUT,
    (S.COLD_NO_RES, E.BECAME_HOT): S.HOT_NO_RES,
    (S.HOT_NO_RES, E.BECAME_COLD): S.COLD_NO_RES,
    (S.COLD_RES, E.SWAP_OUT_RESERVED): S.SWAPPED_OUT,
    (S.COLD_RES, E.BECAME_HOT): S.HOT_RES,
    (S.COLD_RES, E.RESERVATION_CANCELLED): S.COLD_NO_RES,
    (S.HOT_RES, E.BECAME_COLD): S.COLD_RES,
    (S.HOT_RES, E.RESERVATION_CANCELLED): S.HOT_NO_RES,
}


def fsm_transition(page: PageDescriptor, event: FsmEvent, pressure: bool = False) -> PageState:
    """Apply one FSM event to ``page`` and return its new state.

    ``SwapIn`` lands in ColdRes when the page still holds a reservation and in
    ColdNoRes otherwise.  ``BecameHot`` on a reserved page under remote-memory
    pressure goes straight to HotNoRes (the caller frees the entry).
    """
    state = page.fsm_state
    if event is E.SWAP_IN:
        if state is not S.SWAPPED_OUT:
            raise IllegalTransition(f"{state.value} --{event.value}-->")
        new = S.COLD_RES if page.reserved_entry is not None else S.COLD_NO_RES
    else:
        new = _TRANSITIONS.get((state, event))
        if new is None:
            raise IllegalTransition(f"{state.value} --{event.value}-->")
        if pressure and event is E.BECAME_HOT and new is S.HOT_RES:
            new = S.HOT_NO_RES
    page.fsm_state = new
    return new


def check_reservation_invariant(page: PageDescriptor) -> None:
    has = page.reserved_entry is not None
    if page.fsm_state in (S.COLD_RES, S.HOT_RES) and not has:
        raise IllegalTransition(f"page {page.page} in {page.fsm_state.value} without reservation")
    if page.fsm_state in (S.COLD_NO_RES, S.HOT_NO_RES) and has:
        raise IllegalTransition(f"page {page.page} in {page.fsm_state.value} holds entry {page.reserved_entry}")


# --- hotness ------------------------------------------------------------------


class HotnessTracker:
    """Hot iff a page appeared in each of the last ``sets`` active-list head scans."""

    def __init__(self, sets: int = 3, scan_size: int = 64):
        self.sets = sets
        self.scan_size = scan_size
        self.streak: dict[tuple[int, int], int] = {}

    def observe(self, head: Iterable[tuple[int, int]]) -> list[tuple[int, int]]:
        old = self.streak
        self.streak = {k: old.get(k, 0) + 1 for k in head}
        return [k for k, s in self.streak.items() if s >= self.sets]

    def is_hot(self, key: tuple[int, int]) -> bool:
        return self.streak.get(key, 0) >= self.sets

    def forget(self, key: tuple[int, int]) -> None:
        self.streak.pop(key, None)


# --- allocator ----------------------------------------------------------------


@dataclass
class AllocStats:
    lock_path: int = 0
    reserved_path: int = 0
    cancellations: int = 0
    latency: LatencyHistogram = field(default_factory=LatencyHistogram)

    CSV_COLUMNS = ("lock_path", "reserved_path", "cancellations", "latency_bucket_upper_ns", "latency_count")

    def csv_rows(self) -> list[tuple]:
        rows = []
        for upper, count in zip(self.latency.upper_edges(), self.latency.counts):
            rows.append((self.lock_path, self.reserved_path, self.cancellations, upper, count))
        return rows


def alloc_locked(
    partition: Partition,
    contenders: int,
    now: int,
    model: LockCostModel,
    context: object = 0,
) -> tuple[int, int]:
    """Take one entry Free->Occupied via the lock path; returns (entry id, latency ns)."""
    del now  # latency depends only on contention
    entry = partition.alloc(context)
    return entry.id, model.latency(contenders)


class EntryAllocator:
    """One allocation domain: a partition plus its lock-contention bookkeeping."""

    def __init__(
        self,
        partition: Partition,
        model: LockCostModel,
        tracker: ContentionTracker,
        adaptive: bool = True,
        keep_clean_entries: bool = False,
        keep_clean_threshold: float = 0.5,
        removal_fraction: float = 0.75,
        hotness: Optional[HotnessTracker] = None,
    ):
        self.partition = partition
        self.model = model
        self.tracker = tracker
        self.adaptive = adaptive
        self.keep_clean_entries = keep_clean_entries
        self.keep_clean_threshold = keep_clean_threshold
        self.removal_fraction = removal_fraction
        self.hotness = hotness or HotnessTracker()
        self.stats = AllocStats()
        self._hot: set[tuple[int, int]] = set()

    def entry(self, entry_id: int) -> SwapEntry:
        return self.partition.entry(entry_id)

    def under_pressure(self) -> bool:
        p = self.partition
        return p.usage() >= self.removal_fraction * p.capacity

    def alloc_locked(self, context: object, now: int) -> tuple[int, int]:
        c = self.tracker.contenders(context, now)
        entry_id, latency = alloc_locked(self.partition, c, now, self.model, context)
        self.tracker.record(context, now, latency)
        self.stats.lock_path += 1
        self.stats.latency.add(latency)
        return entry_id, latency

    def swap_out_entry(self, page: PageDescriptor, now: int, context: object = 0) -> tuple[int, bool, int]:
        """Pick the entry a page is written to: (entry id, took_lock_path, latency)."""
        if page.reserved_entry is not None:
            e = self.partition.entry(page.reserved_entry)
            e.state = EntryState.OCCUPIED
            self.stats.reserved_path += 1
            if page.fsm_state in (S.HOT_RES,):
                fsm_transition(page, E.BECAME_COLD)
            fsm_transition(page, E.SWAP_OUT_RESERVED)
            return e.id, False, 0
        if page.fsm_state is S.HOT_NO_RES:
            fsm_transition(page, E.BECAME_COLD)
        entry_id, latency = self.alloc_locked(context, now)
        e = self.partition.entry(entry_id)
        e.page = page.key
        if self.adaptive:
            page.reserved_entry = entry_id
        fsm_transition(page, E.FIRST_SWAP_OUT)
        return entry_id, True, latency

    def on_map(self, page: PageDescriptor) -> None:
        """A swapped-in page became local: keep its entry as a reservation or free it."""
        eid = page.entry
        page.entry = None
        if eid is None:
            return
        e = self.partition.entry(eid)
        keep = page.reserved_entry == eid
        if not keep and self.keep_clean_entries and not self.adaptive:
            keep = self.partition.usage() < self.keep_clean_threshold * self.partition.capacity
            if keep:
                page.reserved_entry = eid
        if keep:
            e.state = EntryState.RESERVED
            e.timestamp = None
            page.dirty = False
        else:
            self.partition.free(e)
            page.dirty = True
        if page.fsm_state is S.SWAPPED_OUT:
            fsm_transition(page, E.SWAP_IN)

    def cancel(self, page: PageDescriptor) -> None:
        eid = page.reserved_entry
        if eid is None:
            return
        page.reserved_entry = None
        fsm_transition(page, E.RESERVATION_CANCELLED)
        self.partition.free(self.partition.entry(eid))
        self.stats.cancellations += 1

    def scan_and_cancel(self, head: Sequence[PageDescriptor], resident: dict, now: int) -> int:
        """Update hotness from an active-list head scan; cancel hot reservations under pressure.

        ``resident`` maps page keys to descriptors of locally mapped pages.
        """
        del now
        tracker = self.hotness
        hot_keys = tracker.observe([p.key for p in head])
        hot = set(hot_keys)
        # cold transitions for mapped pages that dropped out of the hot set
        for key in sorted(self._hot - hot):
            page = resident.get(key)
            if page is not None and page.fsm_state in (S.HOT_RES, S.HOT_NO_RES):
                fsm_transition(page, E.BECAME_COLD)
        self._hot = hot
        for key in hot_keys:
            page = resident.get(key)
            if page is not None and page.fsm_state in (S.COLD_RES, S.COLD_NO_RES):
                fsm_transition(page, E.BECAME_HOT)
        if not self.adaptive or not self.under_pressure():
            return 0
        victims = [resident[k] for k in hot_keys if k in resident and resident[k].reserved_entry is not None]
        victims.sort(key=lambda p: (-tracker.streak[p.key], -p.last_access, p.page))
        for page in victims:
            self.cancel(page)
        return len(victims)

    def emergency_cancel(self, resident: dict) -> bool:
        """Free one reservation held by a local page when the partition is full."""
        for page in resident.values():
            if page.reserved_entry is not None:
                self.cancel(page)
                return True
        return False


# --- concurrent stress harness ------------------------------------------------


def stress_reserved_fast_path(
    threads: int = 8,
    pages_per_thread: int = 64,
    rounds: int = 50,
    capacity: Optional[int] = None,
) -> dict:
    """Drive one partition from ``threads`` OS threads.

    Phase 1 swaps every page out once (lock path, reservation recorded).
    Phase 2 cycles swap-in / swap-out on reserved entries and must not touch
    the partition lock.  Returns lock acquisition counts per phase and the
    final entry-state counts.
    """
    capacity = capacity or threads * pages_per_thread * 2
    part = Partition(0, capacity)
    model = LockCostModel(500.0, 0.0, 1.0)
    alloc = EntryAllocator(part, model, ContentionTracker(10_000), adaptive=True)
    pages = [
        [PageDescriptor(page=t * pages_per_thread + i, tenant=0) for i in range(pages_per_thread)]
        for t in range(threads)
    ]
    barrier = threading.Barrier(threads + 1)
    fast_flags: list[list[bool]] = [[] for _ in range(threads)]
    errors: list[BaseException] = []

    def worker(t: int) -> None:
        try:
            barrier.wait()
            for p in pages[t]:
                eid, took, _ = alloc.swap_out_entry(p, 0, context=t)
                p.entry = eid
            barrier.wait()
            barrier.wait()
            for _ in range(rounds):
                for p in pages[t]:
                    alloc.on_map(p)
                    eid, took, _ = alloc.swap_out_entry(p, 0, context=t)
                    p.entry = eid
                    fast_flags[t].append(not took)
            barrier.wait()
        except BaseException as exc:  # pragma: no cover - surfaced to caller
            errors.append(exc)
            barrier.abort()

    ts = [threading.Thread(target=worker, args=(t,)) for t in range(threads)]
    for th in ts:
        th.start()
    barrier.wait()
    barrier.wait()
    after_first = part.lock.acquisitions
    barrier.wait()
    barrier.wait()
    for th in ts:
        th.join()
    if errors:
        raise errors[0]
    counts = part.counts()
    return {
        "lock_acquisitions_first_swapout": after_first,
        "lock_acquisitions_fast_path": part.lock.acquisitions - after_first,
        "fast_path_ops": sum(len(f) for f in fast_flags),
        "all_fast": all(all(f) for f in fast_flags),
        "free": counts[EntryState.FREE],
        "reserved": counts[EntryState.RESERVED],
        "occupied": counts[EntryState.OCCUPIED],
        "capacity": capacity,
    }
