"""Two-dimensional bandwidth scheduling over a simulated fabric.

Vertical: self-clocked weighted fair queueing across flows (a flow is a
tenant in isolated mode, everything in shared-baseline mode).  Horizontal:
inside a flow, demand reads go before prefetches, and in ``canvas`` mode a
prefetch at the queue head is dropped when it would arrive later than its
tenant's timeliness threshold.  Swap-outs travel on the outbound link and
only see the fair-queueing dimension.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Optional, TextIO

from . import engine as ev
from .metrics import LatencyHistogram
from .model import (
    FabricConfig,
    IoRequest,
    QueueOverflow,
    RequestKind,
    SchedulerConfig,
    SwapEntry,
    UnknownRequest,
)

IN = "in"
OUT = "out"

TRACE_COLUMNS = ("time_ns", "tenant", "kind", "queue_delay_ns", "decision")


class TimeoutDecision(str, Enum):
    KEEP_BLOCKING = "KeepBlocking"
    REISSUE_DEMAND = "ReissueDemand"


class Link:
    """One direction of the fabric: a serializing pipe with a fixed base latency."""

    def __init__(self, bandwidth: float, base_latency: int, max_inflight: int):
        self.bandwidth = bandwidth
        self.base_latency = base_latency
        self.max_inflight = max_inflight
        self.busy_until = 0
        self.inflight = 0
        self.bytes_sent = 0
        self.busy_ns = 0

    def serialization(self, size: int) -> int:
        return math.ceil(size * 1e9 / self.bandwidth)

    def ready(self, now: int) -> bool:
        return self.busy_until <= now and self.inflight < self.max_inflight

    def backlog_bytes(self, now: int) -> float:
        return max(0, self.busy_until - now) * self.bandwidth / 1e9


class WfqState:
    """Virtual-clock bookkeeping; V tracks the tag of the request last put in service."""

    def __init__(self, weights: dict[int, float]):
        self.weights = dict(weights)
        self.finish = {f: 0.0 for f in weights}
        self.virtual = 0.0
        # tag stamped on each flow's current head when it reached the head
        self.head: dict[int, float] = {}

    def tag(self, flow: int, size: int) -> float:
        t = self.head.get(flow)
        if t is None:
            t = max(self.virtual, self.finish[flow]) + size / self.weights[flow]
            self.head[flow] = t
        return t

    def forget(self, flow: int) -> None:
        self.head.pop(flow, None)

    def charge(self, flow: int, size: int) -> float:
        t = self.tag(flow, size)
        del self.head[flow]
        self.finish[flow] = t
        self.virtual = t
        return t

    def go_idle(self) -> None:
        self.virtual = max(self.virtual, max(self.finish.values(), default=0.0))


class TimelinessEstimator:
    """Per-tenant timeliness of used prefetches plus an RTT EWMA.

    The drop threshold is a percentile of (first access - prefetch enqueue):
    a prefetch expected to land later than that is unlikely to be in time.
    (first access - arrival) is kept as well for reporting.
    """

    def __init__(self, bootstrap_ns: int, percentile: float, min_samples: int, alpha: float, rtt0: float):
        self.bootstrap = bootstrap_ns
        self.percentile = percentile
        self.min_samples = min_samples
        self.alpha = alpha
        self.rtt = float(rtt0)
        self.samples: deque[int] = deque(maxlen=4096)
        self.since_arrival: deque[int] = deque(maxlen=4096)
        self.count = 0
        self._theta = bootstrap_ns
        self._since = 0

    def add_sample(self, ns: int) -> None:
        self.samples.append(ns)
        self.count += 1
        self._since += 1
        if self.count >= self.min_samples and (self._since >= 64 or self.count == self.min_samples):
            self._since = 0
            ordered = sorted(self.samples)
            idx = min(len(ordered) - 1, max(0, math.ceil(self.percentile * len(ordered)) - 1))
            self._theta = max(1, ordered[idx])

    def observe_rtt(self, ns: float) -> None:
        self.rtt += self.alpha * (ns - self.rtt)

    @property
    def theta(self) -> int:
        return self._theta if self.count >= self.min_samples else self.bootstrap


@dataclass
class FlowQueues:
    demand: deque = field(default_factory=deque)
    prefetch: deque = field(default_factory=deque)
    out: deque = field(default_factory=deque)

    def backlogged(self, direction: str) -> bool:
        if direction == IN:
            return bool(self.demand or self.prefetch)
        return bool(self.out)


@dataclass
class SchedStats:
    dispatched: dict = field(default_factory=dict)  # (tenant, kind) -> count
    bytes_by_flow: dict = field(default_factory=dict)  # (direction, flow) -> bytes
    bytes_by_tenant: dict = field(default_factory=dict)  # (direction, tenant) -> bytes
    dropped: dict = field(default_factory=dict)  # tenant -> count
    discarded: dict = field(default_factory=dict)  # tenant -> count
    reissued: dict = field(default_factory=dict)  # tenant -> count


def _ignore(*_args) -> None:
    pass


class RdmaScheduler:
    def __init__(
        self,
        engine: ev.Engine,
        fabric: FabricConfig,
        cfg: SchedulerConfig,
        weights: dict[int, float],
        flow_of: Callable[[int], int],
        entry_of: Callable[[int], SwapEntry],
        deliver: Callable[[IoRequest, int], None] = _ignore,
        drop: Callable[[IoRequest, int], None] = _ignore,
        discard: Callable[[IoRequest, int], None] = _ignore,
        tenants: Optional[list[int]] = None,
        trace: Optional[TextIO] = None,
    ):
        self.engine = engine
        self.fabric = fabric
        self.cfg = cfg
        self.mode = cfg.mode or "canvas"
        self.flow_of = flow_of
        self.entry_of = entry_of
        self.deliver = deliver
        self.drop = drop
        self.discard = discard
        self.flows = {f: FlowQueues() for f in weights}
        self.weights = dict(weights)
        self.wfq = {IN: WfqState(weights), OUT: WfqState(weights)}
        self.links = {
            IN: Link(fabric.bandwidth_bytes_per_s, fabric.base_latency_ns, fabric.max_inflight),
            OUT: Link(fabric.bandwidth_bytes_per_s, fabric.base_latency_ns, fabric.max_inflight),
        }
        self._kicked = {IN: False, OUT: False}
        self.inflight: dict[int, IoRequest] = {}
        self._prefetch_by_entry: dict[int, IoRequest] = {}
        tenants = tenants if tenants is not None else list(weights)
        self.timeliness = {
            t: TimelinessEstimator(
                cfg.timeliness_bootstrap_ns,
                cfg.timeliness_percentile,
                cfg.timeliness_min_samples,
                cfg.ewma_alpha,
                fabric.base_latency_ns,
            )
            for t in tenants
        }
        self.stats = SchedStats()
        self.latency: dict[tuple[int, RequestKind], LatencyHistogram] = {}
        self.samples: dict[tuple[int, RequestKind], list[int]] = {}
        self.trace = trace
        if trace is not None:
            trace.write(",".join(TRACE_COLUMNS) + "\n")
        engine.on(ev.SCHEDULER_DISPATCH, self._on_dispatch_event)
        engine.on(ev.IO_COMPLETE, self._on_complete_event)

    # --- producer side ------------------------------------------------------

    def _queue(self, req: IoRequest) -> deque:
        fq = self.flows[self.flow_of(req.tenant)]
        if req.kind is RequestKind.DEMAND_IN:
            return fq.demand
        if req.kind is RequestKind.PREFETCH_IN:
            return fq.prefetch
        return fq.out

    def queue_key(self, req: IoRequest) -> tuple[int, RequestKind]:
        return (self.flow_of(req.tenant), req.kind)

    def has_room(self, req: IoRequest) -> bool:
        return len(self._queue(req)) < self.fabric.queue_depth

    def enqueue(self, req: IoRequest, now: int) -> None:
        q = self._queue(req)
        if len(q) >= self.fabric.queue_depth:
            raise QueueOverflow(f"tenant {req.tenant} {req.kind.value} queue full")
        req.enqueue_time = now
        entry = self.entry_of(req.entry)
        if req.kind is RequestKind.PREFETCH_IN:
            entry.timestamp = now
            self._prefetch_by_entry[entry.id] = req
        elif req.kind is RequestKind.DEMAND_IN:
            entry.timestamp = None
        q.append(req)
        self._kick(OUT if req.kind is RequestKind.SWAP_OUT else IN, now)

    def _kick(self, direction: str, now: int) -> None:
        if self._kicked[direction]:
            return
        link = self.links[direction]
        if link.inflight >= link.max_inflight:
            return  # a completion will kick again
        self._kicked[direction] = True
        self.engine.schedule(max(now, link.busy_until), ev.SCHEDULER_DISPATCH, -1, direction)

    # --- timeliness ---------------------------------------------------------

    def theta(self, tenant: int) -> int:
        return self.timeliness[tenant].theta

    def reissue_timeout(self, tenant: int) -> int:
        if self.cfg.reissue_timeout_ns is not None:
            return self.cfg.reissue_timeout_ns
        est = self.timeliness[tenant]
        return int(est.theta + est.rtt)

    def record_timeliness(self, tenant: int, since_enqueue: int, since_arrival: Optional[int] = None) -> None:
        est = self.timeliness[tenant]
        est.add_sample(since_enqueue)
        if since_arrival is not None:
            est.since_arrival.append(since_arrival)

    def allocated_rate(self, flow: int, direction: str = IN) -> float:
        bw = self.links[direction].bandwidth
        active = [f for f, fq in self.flows.items() if fq.backlogged(direction) or f == flow]
        total = sum(self.weights[f] for f in active)
        return bw * self.weights[flow] / total

    def estimate_arrival(self, req: IoRequest, now: int, bytes_ahead: Optional[float] = None) -> int:
        """Expected completion time of ``req`` if it were put behind everything ahead of it."""
        flow = self.flow_of(req.tenant)
        if bytes_ahead is None:
            fq = self.flows[flow]
            bytes_ahead = self.links[IN].backlog_bytes(now) + sum(r.size_bytes for r in fq.demand)
        rate = self.allocated_rate(flow)
        est = self.timeliness[req.tenant]
        return int(now + (bytes_ahead + req.size_bytes) * 1e9 / rate + est.rtt)

    def check_inflight_timeout(self, entry: SwapEntry, tenant: int, now: int) -> TimeoutDecision:
        """Decide whether a thread faulting on an in-flight read should stop waiting.

        An empty timestamp means the in-flight read is a demand request, which
        is always waited for.
        """
        if self.mode != "canvas" or entry.timestamp is None:
            return TimeoutDecision.KEEP_BLOCKING
        if now - entry.timestamp > self.reissue_timeout(tenant):
            entry.valid = False
            old = self._prefetch_by_entry.get(entry.id)
            if old is not None:
                old.invalidated = True
            self.stats.reissued[tenant] = self.stats.reissued.get(tenant, 0) + 1
            return TimeoutDecision.REISSUE_DEMAND
        return TimeoutDecision.KEEP_BLOCKING

    # --- consumer side ------------------------------------------------------

    def _pick_flow(self, direction: str) -> Optional[int]:
        wfq = self.wfq[direction]
        best = None
        best_tag = 0.0
        for f, fq in self.flows.items():
            if not fq.backlogged(direction):
                wfq.forget(f)
                continue
            head = (fq.demand or fq.prefetch) if direction == IN else fq.out
            t = wfq.tag(f, head[0].size_bytes)
            if best is None or t < best_tag:
                best, best_tag = f, t
        return best

    def _log(self, now: int, req: IoRequest, decision: str) -> None:
        if self.trace is not None:
            self.trace.write(f"{now},{req.tenant},{req.kind.value},{now - req.enqueue_time},{decision}\n")

    def _select(self, direction: str, now: int) -> Optional[IoRequest]:
        while True:
            flow = self._pick_flow(direction)
            if flow is None:
                self.wfq[direction].go_idle()
                return None
            fq = self.flows[flow]
            if direction == OUT:
                return fq.out.popleft()
            if fq.demand:
                return fq.demand.popleft()
            req = fq.prefetch[0]
            entry = self.entry_of(req.entry)
            if not entry.valid:
                fq.prefetch.popleft()
                self._finish_invalid(req, now)
                continue
            if self.mode == "canvas":
                theta = self.theta(req.tenant)
                if self.estimate_arrival(req, now) > req.enqueue_time + theta:
                    fq.prefetch.popleft()
                    entry.timestamp = None
                    self._prefetch_by_entry.pop(entry.id, None)
                    self.stats.dropped[req.tenant] = self.stats.dropped.get(req.tenant, 0) + 1
                    self._log(now, req, "drop")
                    self.drop(req, now)
                    continue
            return fq.prefetch.popleft()

    def dispatch(self, now: int, direction: str = IN) -> Optional[IoRequest]:
        """Put the next request on the wire, or return None when nothing is dispatchable."""
        link = self.links[direction]
        if not link.ready(now):
            return None
        req = self._select(direction, now)
        if req is None:
            return None
        flow = self.flow_of(req.tenant)
        self.wfq[direction].charge(flow, req.size_bytes)
        ser = link.serialization(req.size_bytes)
        link.busy_until = now + ser
        link.busy_ns += ser
        link.inflight += 1
        link.bytes_sent += req.size_bytes
        req.issue_time = now
        self.inflight[req.id] = req
        st = self.stats
        st.dispatched[(req.tenant, req.kind)] = st.dispatched.get((req.tenant, req.kind), 0) + 1
        k = (direction, flow)
        st.bytes_by_flow[k] = st.bytes_by_flow.get(k, 0) + req.size_bytes
        k = (direction, req.tenant)
        st.bytes_by_tenant[k] = st.bytes_by_tenant.get(k, 0) + req.size_bytes
        self._log(now, req, "dispatch")
        self.engine.schedule(now + ser + link.base_latency, ev.IO_COMPLETE, req.tenant, req.id)
        return req

    def _on_dispatch_event(self, e: ev.SimEvent) -> None:
        direction = e.data
        self._kicked[direction] = False
        now = e.time
        self.dispatch(now, direction)
        if any(fq.backlogged(direction) for fq in self.flows.values()):
            self._kick(direction, now)

    def _finish_invalid(self, req: IoRequest, now: int) -> None:
        entry = self.entry_of(req.entry)
        entry.valid = True
        if self._prefetch_by_entry.get(entry.id) is req:
            del self._prefetch_by_entry[entry.id]
        self.stats.discarded[req.tenant] = self.stats.discarded.get(req.tenant, 0) + 1
        self._log(now, req, "discard")
        self.discard(req, now)

    def on_complete(self, req_id: int, now: int) -> bool:
        """Fabric completion; returns True when the payload was delivered."""
        req = self.inflight.pop(req_id, None)
        if req is None:
            raise UnknownRequest(req_id)
        direction = OUT if req.kind is RequestKind.SWAP_OUT else IN
        link = self.links[direction]
        link.inflight -= 1
        req.complete_time = now
        if req.kind is RequestKind.PREFETCH_IN:
            entry = self.entry_of(req.entry)
            if not entry.valid:
                self._finish_invalid(req, now)
                self._after_completion(direction, now)
                return False
            assert not req.invalidated, f"invalidated request {req.id} about to be installed"
            if self._prefetch_by_entry.get(entry.id) is req:
                del self._prefetch_by_entry[entry.id]
            entry.timestamp = None
        if direction == IN:
            est = self.timeliness[req.tenant]
            est.observe_rtt(now - req.issue_time - link.serialization(req.size_bytes))
        lat = now - req.enqueue_time
        key = (req.tenant, req.kind)
        h = self.latency.get(key)
        if h is None:
            h = self.latency[key] = LatencyHistogram()
            self.samples[key] = []
        h.add(lat)
        self.samples[key].append(lat)
        self.deliver(req, now)
        self._after_completion(direction, now)
        return True

    def _after_completion(self, direction: str, now: int) -> None:
        if any(fq.backlogged(direction) for fq in self.flows.values()):
            self._kick(direction, now)

    def _on_complete_event(self, e: ev.SimEvent) -> None:
        self.on_complete(e.data, e.time)

    def queued(self, direction: str = IN) -> int:
        if direction == IN:
            return sum(len(fq.demand) + len(fq.prefetch) for fq in self.flows.values())
        return sum(len(fq.out) for fq in self.flows.values())
