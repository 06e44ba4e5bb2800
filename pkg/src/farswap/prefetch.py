"""Two-tier prefetching.

The kernel tier is a strided detector over the tenant's recent fault history
whose window backs off when no pattern is seen.  When it keeps producing
fewer than ``threshold`` pages, faults are forwarded to an application tier
that either follows recorded object references (summary graph) or detects
strides per application thread.  ``LeapPrefetcher`` is the aggressive
baseline that votes over a tenant-global history and always prefetches.
"""

from __future__ import annotations

import bisect
from collections import deque
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional, Sequence

from .model import PAGE_SIZE, PrefetchConfig


def majority(values: Sequence[int]) -> Optional[int]:
    """Boyer-Moore majority: the element occurring more than len/2 times, if any."""
    cand, count = None, 0
    for v in values:
        if count == 0:
            cand, count = v, 1
        elif v == cand:
            count += 1
        else:
            count -= 1
    if cand is None:
        return None
    if sum(1 for v in values if v == cand) * 2 > len(values):
        return cand
    return None


class KernelPrefetcher:
    def __init__(self, history: int = 8, max_window: int = 8):
        self.history: deque[int] = deque(maxlen=history)
        self.max_window = max_window
        self.window = max_window

    def observe(self, page: int) -> None:
        self.history.append(page)

    def stride(self) -> Optional[int]:
        h = self.history
        if len(h) < 3:
            return None
        it = iter(h)
        prev = next(it)
        cur = next(it)
        s = cur - prev
        if s == 0:
            return None
        prev = cur
        for cur in it:
            if cur - prev != s:
                return None
            prev = cur
        return s

    def prefetch(self, fault_page: int) -> list[int]:
        """Record a demand miss and return the pages to read ahead."""
        self.history.append(fault_page)
        s = self.stride()
        if s is not None:
            out = [fault_page + s * k for k in range(1, self.window + 1)]
            self.window = min(self.window + 1, self.max_window)
        else:
            self.window //= 2
            out = [fault_page + k for k in range(1, self.window + 1)]
        return [p for p in out if p >= 0]


class ForwardingController:
    """Forward to the application tier once the kernel tier stays below threshold for N faults."""

    def __init__(self, threshold: int = 2, window: int = 3):
        self.threshold = threshold
        self.window = window
        self.consecutive_low = 0
        self.forwarding = False

    def update(self, last_prefetch_count: int) -> bool:
        if last_prefetch_count < self.threshold:
            self.consecutive_low += 1
        else:
            self.consecutive_low = 0
        self.forwarding = self.consecutive_low >= self.window
        return self.forwarding


class SummaryGraph:
    """Cross-group reference edges; a node is ``group_pages`` consecutive pages."""

    def __init__(self, group_pages: int = 16):
        self.group_pages = group_pages
        self.edges: dict[int, list[int]] = {}
        self._edge_set: set[tuple[int, int]] = set()

    def group_of_addr(self, addr: int) -> int:
        return addr // (PAGE_SIZE * self.group_pages)

    def group_of_page(self, page: int) -> int:
        return page // self.group_pages

    def record_reference(self, src_addr: int, dst_addr: int) -> bool:
        gs = self.group_of_addr(src_addr)
        gd = self.group_of_addr(dst_addr)
        if gs == gd or (gs, gd) in self._edge_set:
            return False
        self._edge_set.add((gs, gd))
        self.edges.setdefault(gs, []).append(gd)
        return True

    def edge_count(self) -> int:
        return len(self._edge_set)

    def rebuild(self) -> None:
        self.edges.clear()
        self._edge_set.clear()

    def reachable(self, start_group: int, hops: int = 3) -> list[int]:
        """Groups within ``hops`` edges of the start, in BFS order, never revisiting a group."""
        seen = {start_group}
        out: list[int] = []
        frontier = [start_group]
        for _ in range(hops):
            nxt = []
            for g in frontier:
                for d in self.edges.get(g, ()):
                    if d not in seen:
                        seen.add(d)
                        out.append(d)
                        nxt.append(d)
            if not nxt:
                break
            frontier = nxt
        return out

    def prefetch(self, fault_page: int, is_candidate: Callable[[int], bool], cap: int, hops: int = 1) -> list[int]:
        out: list[int] = []
        g = self.group_pages
        for grp in self.reachable(self.group_of_page(fault_page), hops):
            base = grp * g
            for p in range(base, base + g):
                if is_candidate(p):
                    out.append(p)
                    if len(out) >= cap:
                        return out
        return out


class ThreadKind(str, Enum):
    APP = "App"
    AUX = "Aux"


class ThreadPrefetcher:
    """Per-thread delta rings with majority-vote stride detection."""

    def __init__(self, ring: int = 32, window: int = 8):
        self.ring_size = ring
        self.window = window
        self.rings: dict[int, deque[int]] = {}
        self.last: dict[int, int] = {}
        self.aux: set[int] = set()

    def tag(self, thread: int, kind: ThreadKind) -> None:
        if kind is ThreadKind.AUX:
            self.aux.add(thread)
        else:
            self.aux.discard(thread)

    def prefetch(self, thread: int, fault_page: int) -> list[int]:
        if thread in self.aux:
            return []
        ring = self.rings.get(thread)
        if ring is None:
            ring = self.rings[thread] = deque(maxlen=self.ring_size)
        last = self.last.get(thread)
        self.last[thread] = fault_page
        if last is not None and fault_page != last:
            ring.append(fault_page - last)
        if not ring:
            return []
        s = majority(ring)
        if s is None:
            return []
        return [p for p in (fault_page + s * k for k in range(1, self.window + 1)) if p >= 0]


class LargeArrayIndex:
    """Disjoint intervals [start, start+length) of arrays at least ``threshold`` bytes."""

    def __init__(self, threshold: int):
        self.threshold = threshold
        self._starts: list[int] = []
        self._items: list[tuple[int, int, int]] = []

    def __len__(self) -> int:
        return len(self._items)

    def insert(self, start: int, length: int, array_id: int) -> bool:
        if length < self.threshold:
            return False
        end = start + length
        # a new allocation supersedes any stale overlapping record
        i = bisect.bisect_left(self._starts, start)
        if i > 0 and self._items[i - 1][0] + self._items[i - 1][1] > start:
            i -= 1
        j = i
        while j < len(self._items) and self._items[j][0] < end:
            j += 1
        del self._starts[i:j]
        del self._items[i:j]
        self._starts.insert(i, start)
        self._items.insert(i, (start, length, array_id))
        return True

    def lookup(self, addr: int) -> Optional[tuple[int, int, int]]:
        i = bisect.bisect_right(self._starts, addr) - 1
        if i >= 0:
            start, length, aid = self._items[i]
            if addr < start + length:
                return self._items[i]
        return None


class Policy(str, Enum):
    THREAD = "ThreadBased"
    REFERENCE = "ReferenceBased"


def choose_policy(
    profile: str,
    fault_addr: int,
    running_app_threads: int,
    arrays: LargeArrayIndex,
    many_threads_min: int = 4,
) -> Policy:
    if profile == "native":
        return Policy.THREAD
    if running_app_threads >= many_threads_min and arrays.lookup(fault_addr) is not None:
        return Policy.THREAD
    return Policy.REFERENCE


class LeapPrefetcher:
    """Majority vote over a global delta history; falls back to contiguous pages."""

    def __init__(self, history: int = 32, window: int = 8, fallback: int = 8):
        self.deltas: deque[int] = deque(maxlen=history)
        self.window = window
        self.fallback = fallback
        self.last: Optional[int] = None

    def observe(self, page: int) -> None:
        if self.last is not None and page != self.last:
            self.deltas.append(page - self.last)
        self.last = page

    def trend(self) -> Optional[int]:
        d = list(self.deltas)
        n = len(d)
        w = 4
        while True:
            m = majority(d[-w:]) if d else None
            if m is not None:
                return m
            if w >= n:
                return None
            w *= 2

    def prefetch(self, fault_page: int) -> list[int]:
        self.observe(fault_page)
        s = self.trend()
        if s is not None:
            out = [fault_page + s * k for k in range(1, self.window + 1)]
        else:
            out = [fault_page + k for k in range(1, self.fallback + 1)]
        return [p for p in out if p >= 0]


@dataclass
class PrefetchDecision:
    kernel: list[int]
    app: list[int]
    forwarding: bool
    policy: Optional[Policy] = None


class TenantPrefetcher:
    """The per-tenant prefetch stack selected by ``kind``.

    ``on_fault`` is called for every fault (swap-cache hits included) so the
    detectors see the full fault stream; read-ahead is only computed on misses,
    while the application tier, when forwarding, runs on every fault.
    """

    def __init__(
        self,
        kind: str,
        cfg: PrefetchConfig,
        profile: str = "native",
        forward_threshold: int = 2,
        forward_window: int = 3,
    ):
        self.kind = kind
        self.cfg = cfg
        self.profile = profile
        self.kernel = KernelPrefetcher(cfg.kernel_history, cfg.max_window)
        self.controller = ForwardingController(forward_threshold, forward_window)
        self.graph = SummaryGraph(cfg.group_pages)
        self.threads = ThreadPrefetcher(cfg.thread_ring, cfg.app_prefetch_window)
        self.arrays = LargeArrayIndex(cfg.large_array_bytes)
        self.leap = LeapPrefetcher(cfg.leap_history, cfg.leap_window, cfg.leap_fallback_count)
        self.app_threads: set[int] = set()

    def tag_thread(self, thread: int, kind: ThreadKind) -> None:
        self.threads.tag(thread, kind)
        if kind is ThreadKind.APP:
            self.app_threads.add(thread)
        else:
            self.app_threads.discard(thread)

    def record_reference(self, src_addr: int, dst_addr: int) -> None:
        self.graph.record_reference(src_addr, dst_addr)

    def record_array(self, start: int, length: int, array_id: int) -> None:
        self.arrays.insert(start, length, array_id)

    def on_fault(self, thread: int, page: int, miss: bool, is_candidate: Callable[[int], bool]) -> PrefetchDecision:
        kind = self.kind
        if kind == "none":
            return PrefetchDecision([], [], False)
        if kind == "leap":
            if miss:
                return PrefetchDecision(self.leap.prefetch(page), [], False)
            self.leap.observe(page)
            return PrefetchDecision([], [], False)
        if miss:
            kp = self.kernel.prefetch(page)
            forwarding = self.controller.update(len(kp)) if kind == "two-tier" else False
        else:
            self.kernel.observe(page)
            kp = []
            forwarding = self.controller.forwarding if kind == "two-tier" else False
        if not forwarding:
            return PrefetchDecision(kp, [], False)
        policy = choose_policy(
            self.profile,
            page * PAGE_SIZE,
            len(self.app_threads),
            self.arrays,
            self.cfg.many_threads_min,
        )
        if policy is Policy.THREAD:
            app = self.threads.prefetch(thread, page)
        else:
            app = self.graph.prefetch(page, is_candidate, self.cfg.app_prefetch_cap, self.cfg.ref_hops)
        return PrefetchDecision(kp, app, True, policy)
