"""Deterministic discrete-event executor with keyed random streams."""

from __future__ import annotations

import hashlib
import heapq
import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, TextIO

from .model import MAX_SIM_TIME, SchedulingInPast

# Payload kinds.  The first five are the public event vocabulary; the rest are
# internal continuations of the fault path.
ACCESS = "Access"
IO_COMPLETE = "IoComplete"
SCAN_TICK = "ScanTick"
SCHEDULER_DISPATCH = "SchedulerDispatch"
CACHE_SHRINK = "CacheShrink"
ISSUE_DEMAND = "IssueDemand"
APP_PREFETCH = "AppPrefetch"
BLOCK_TIMEOUT = "BlockTimeout"
RESUME = "Resume"


@dataclass(slots=True)
class SimEvent:
    time: int
    seq: int
    kind: str
    tenant: int = -1
    data: Any = None

    def detail(self) -> str:
        d = self.data
        if d is None:
            return "-"
        if isinstance(d, tuple):
            return ",".join(str(x) for x in d)
        return str(d)


@dataclass
class EngineStats:
    now: int = 0
    dispatched: int = 0
    by_kind: Counter = field(default_factory=Counter)

    def __getitem__(self, kind: str) -> int:
        return self.by_kind[kind]


class SeededRng:
    """Independent random streams keyed by (seed, tenant, stream name)."""

    def __init__(self, seed: int):
        self.seed = seed

    def derive(self, tenant: int, stream: str) -> int:
        h = hashlib.blake2b(f"{self.seed}/{tenant}/{stream}".encode(), digest_size=8)
        return int.from_bytes(h.digest(), "big")

    def stream(self, tenant: int, stream: str) -> random.Random:
        return random.Random(self.derive(tenant, stream))


class Engine:
    """Single-threaded event loop ordered by (time, seq).

    Handlers are registered per payload kind.  An optional text sink receives
    one tab-separated line per dispatched event.
    """

    def __init__(self, event_log: Optional[TextIO] = None, check_order: bool = False):
        self.now = 0
        self._heap: list[tuple[int, int, SimEvent]] = []
        self._seq = 0
        self._handlers: dict[str, Callable[[SimEvent], None]] = {}
        self._stopped = False
        self.stats = EngineStats()
        self.event_log = event_log
        self.check_order = check_order
        self._last = (-1, -1)

    def on(self, kind: str, handler: Callable[[SimEvent], None]) -> None:
        self._handlers[kind] = handler

    def schedule(self, time: int, kind: str, tenant: int = -1, data: Any = None) -> SimEvent:
        if time < self.now:
            raise SchedulingInPast(f"{kind} at {time} < now {self.now}")
        if time > MAX_SIM_TIME:
            raise OverflowError(f"simulated time {time} overflows")
        ev = SimEvent(time, self._seq, kind, tenant, data)
        self._seq += 1
        heapq.heappush(self._heap, (time, ev.seq, ev))
        return ev

    def schedule_in(self, delay: int, kind: str, tenant: int = -1, data: Any = None) -> SimEvent:
        return self.schedule(self.now + delay, kind, tenant, data)

    def pending(self) -> int:
        return len(self._heap)

    def stop(self) -> None:
        self._stopped = True

    def run_until(self, t: int) -> EngineStats:
        heap = self._heap
        handlers = self._handlers
        log = self.event_log
        stats = self.stats
        self._stopped = False
        while heap and heap[0][0] <= t:
            time, seq, ev = heapq.heappop(heap)
            if self.check_order:
                assert (time, seq) > self._last, "event dispatched out of order"
                self._last = (time, seq)
            self.now = time
            stats.dispatched += 1
            stats.by_kind[ev.kind] += 1
            if log is not None:
                log.write(f"{time}\t{seq}\t{ev.kind}\t{ev.tenant}\t{ev.detail()}\n")
            handler = handlers.get(ev.kind)
            if handler is not None:
                handler(ev)
            if self._stopped:
                break
        if not self._stopped:
            self.now = max(self.now, t)
        stats.now = self.now
        return stats
