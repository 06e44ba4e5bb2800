"""Domain types and scenario configuration.

Everything here is a plain value type.  Mutable descriptors (pages, entries,
requests) are only mutated from inside the single-threaded engine or the
allocator stress harness.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Optional

PAGE_SIZE = 4096
DEFAULT_SWAP_CACHE_BYTES = 32 * 2**20
DEFAULT_REMOVAL_FRACTION = 0.75
DEFAULT_FORWARD_WINDOW = 3
DEFAULT_FORWARD_THRESHOLD = 2
DEFAULT_SHRINK_BATCH = 32
LARGE_ARRAY_BYTES = 2**20
MAX_SIM_TIME = 2**63 - 1

SHARED = -1  # owner id of the global partition / cache


class SimError(Exception):
    """Base class for all simulator errors."""


class SchedulingInPast(SimError):
    pass


class UnknownTenant(SimError):
    pass


class FaultOnMappedPage(SimError):
    pass


class UnknownRequest(SimError):
    pass


class NothingEvictable(SimError):
    pass


class PartitionFull(SimError):
    pass


class IllegalTransition(SimError):
    pass


class QueueOverflow(SimError):
    pass


# --- configuration violations -------------------------------------------------


class ConfigViolation(SimError):
    def __init__(self, message: str, tenant: Optional[str] = None):
        self.tenant = tenant
        super().__init__(f"{message} (tenant {tenant!r})" if tenant else message)


class ZeroWeight(ConfigViolation):
    pass


class CacheExceedsLocalMemory(ConfigViolation):
    pass


class EmptyTenantList(ConfigViolation):
    pass


class UnknownKey(ConfigViolation):
    pass


class InvalidValue(ConfigViolation):
    pass


class ConfigError(SimError):
    """Raised by :func:`validate_config` with every violation found."""

    def __init__(self, violations: list[ConfigViolation]):
        self.violations = violations
        super().__init__("; ".join(str(v) for v in violations))


# --- runtime domain types -----------------------------------------------------


class PageState(str, Enum):
    COLD_NO_RES = "ColdNoRes"
    HOT_NO_RES = "HotNoRes"
    COLD_RES = "ColdRes"
    HOT_RES = "HotRes"
    SWAPPED_OUT = "SwappedOut"


class Residency(str, Enum):
    UNTOUCHED = "untouched"
    MAPPED = "mapped"
    CACHED = "cached"
    REMOTE = "remote"


class EntryState(str, Enum):
    FREE = "Free"
    RESERVED = "Reserved"
    OCCUPIED = "Occupied"


class RequestKind(str, Enum):
    DEMAND_IN = "DemandIn"
    PREFETCH_IN = "PrefetchIn"
    SWAP_OUT = "SwapOut"


@dataclass(slots=True)
class PageDescriptor:
    page: int
    tenant: int
    fsm_state: PageState = PageState.COLD_NO_RES
    reserved_entry: Optional[int] = None
    dirty: bool = False
    mapcount: int = 1
    last_access: int = 0
    residency: Residency = Residency.UNTOUCHED
    # entry holding this page's data while it is not local
    entry: Optional[int] = None
    # page was brought in by a prefetch and not yet touched
    prefetched: bool = False
    prefetch_enqueued: Optional[int] = None
    prefetch_arrival: Optional[int] = None

    @property
    def key(self) -> tuple[int, int]:
        return (self.tenant, self.page)


@dataclass(slots=True)
class SwapEntry:
    id: int
    owner: int
    state: EntryState = EntryState.FREE
    timestamp: Optional[int] = None
    valid: bool = True
    page: Optional[tuple[int, int]] = None


@dataclass(slots=True)
class IoRequest:
    id: int
    kind: RequestKind
    tenant: int
    page: int
    entry: int
    size_bytes: int = PAGE_SIZE
    enqueue_time: int = 0
    issue_time: Optional[int] = None
    complete_time: Optional[int] = None
    # ground truth used by safety assertions, never by the protocol itself
    invalidated: bool = False


# --- configuration ------------------------------------------------------------


@dataclass
class TenantConfig:
    name: str
    local_mem_pages: int
    remote_partition_pages: int
    swap_cache_bytes: int = DEFAULT_SWAP_CACHE_BYTES
    bandwidth_weight: float = 1.0
    cores: int = 1
    reservation_removal_fraction: float = DEFAULT_REMOVAL_FRACTION
    prefetch_forward_threshold: int = DEFAULT_FORWARD_THRESHOLD
    prefetch_forward_window: int = DEFAULT_FORWARD_WINDOW
    allocator: str = "adaptive"
    prefetcher: str = "two-tier"
    profile: str = "native"

    @property
    def cache_pages(self) -> int:
        return self.swap_cache_bytes // PAGE_SIZE


@dataclass
class FabricConfig:
    bandwidth_bytes_per_s: float = 5e9
    base_latency_ns: int = 5_000
    max_inflight: int = 64
    queue_depth: int = 4096


@dataclass
class SchedulerConfig:
    mode: str = ""  # "canvas" | "fastswap-baseline"; empty resolves per scenario mode
    timeliness_bootstrap_ns: int = 70_000
    timeliness_percentile: float = 0.9
    timeliness_min_samples: int = 100
    ewma_alpha: float = 0.125
    reissue_timeout_ns: Optional[int] = None


@dataclass
class AllocatorConfig:
    cluster_size: int = 256
    base_ns: int = 500
    calibration: list = field(default_factory=lambda: [[16, 10_000], [48, 130_000]])
    contention_window_ns: int = 10_000
    keep_clean_entries: bool = False
    keep_clean_threshold: float = 0.5
    hot_sets: int = 3
    scan_size: int = 64
    scan_period_ns: int = 50_000_000


@dataclass
class PrefetchConfig:
    kernel_history: int = 8
    max_window: int = 8
    group_pages: int = 16
    thread_ring: int = 32
    app_prefetch_window: int = 8
    app_prefetch_cap: int = 32
    ref_hops: int = 1
    many_threads_min: int = 4
    large_array_bytes: int = LARGE_ARRAY_BYTES
    forward_cost_ns: int = 2_000
    leap_history: int = 32
    leap_window: int = 8
    leap_fallback_count: int = 8
    shared_policy: str = "leap"


@dataclass
class WorkloadConfig:
    tenant: str
    kind: str
    footprint_pages: int = 0
    threads: int = 1
    ops_per_thread: Optional[int] = None
    rate: float = 1e6
    write_ratio: float = 0.0
    closed_loop: bool = True
    params: dict = field(default_factory=dict)


@dataclass
class ScenarioConfig:
    tenants: list[TenantConfig]
    workloads: list[WorkloadConfig]
    seed: int = 0
    duration_ns: int = 100_000_000
    mode: str = "isolated"
    fabric: FabricConfig = field(default_factory=FabricConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    allocator: AllocatorConfig = field(default_factory=AllocatorConfig)
    prefetch: PrefetchConfig = field(default_factory=PrefetchConfig)
    cache_shrink_batch: int = DEFAULT_SHRINK_BATCH
    fault_overhead_ns: int = 1_000

    def tenant_index(self, name: str) -> int:
        for i, t in enumerate(self.tenants):
            if t.name == name:
                return i
        raise UnknownTenant(name)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


MODES = ("isolated", "shared-baseline")
SCHEDULER_MODES = ("canvas", "fastswap-baseline")
ALLOCATORS = ("baseline", "adaptive")
PREFETCHERS = ("none", "kernel", "two-tier", "leap")
PROFILES = ("native", "managed")
WORKLOAD_KINDS = (
    "sequential",
    "strided",
    "uniform",
    "pointer-chase",
    "epochal",
    "zipf",
    "interleaved-strided",
    "hot-then-abandon",
    "runs-and-noise",
    "trace",
)

_SECTIONS = {
    "fabric": FabricConfig,
    "scheduler": SchedulerConfig,
    "allocator": AllocatorConfig,
    "prefetch": PrefetchConfig,
}
_TOP_KEYS = {
    "tenants",
    "workloads",
    "seed",
    "duration_ns",
    "mode",
    "cache_shrink_batch",
    "fault_overhead_ns",
    *_SECTIONS,
}


def _fields(cls) -> set[str]:
    return set(cls.__dataclass_fields__)


def _build(cls, raw: dict, where: str, errors: list, tenant: Optional[str] = None):
    unknown = sorted(set(raw) - _fields(cls))
    for k in unknown:
        errors.append(UnknownKey(f"unknown key {k!r} in {where}", tenant))
    try:
        return cls(**{k: v for k, v in raw.items() if k not in unknown})
    except TypeError as exc:
        errors.append(InvalidValue(f"{where}: {exc}", tenant))
        return None


def validate_config(raw: dict | ScenarioConfig) -> ScenarioConfig:
    """Normalize a scenario (dict or config object), filling defaults.

    Raises ConfigError carrying every violation found.
    """
    if isinstance(raw, ScenarioConfig):
        raw = raw.to_dict()
    errors: list[ConfigViolation] = []
    for k in sorted(set(raw) - _TOP_KEYS):
        errors.append(UnknownKey(f"unknown top-level key {k!r}"))

    tenants = []
    for t in raw.get("tenants") or []:
        name = t.get("name", "?") if isinstance(t, dict) else "?"
        tc = _build(TenantConfig, t, "tenant", errors, name)
        if tc is not None:
            tenants.append(tc)
    if not raw.get("tenants"):
        errors.append(EmptyTenantList("scenario declares no tenants"))

    names = [t.name for t in tenants]
    seen = set()
    for t in tenants:
        if t.name in seen:
            errors.append(InvalidValue("duplicate tenant name", t.name))
        seen.add(t.name)
        if not t.bandwidth_weight or t.bandwidth_weight <= 0:
            errors.append(ZeroWeight("bandwidth_weight must be > 0", t.name))
        for fname in ("local_mem_pages", "remote_partition_pages", "cores", "prefetch_forward_window"):
            if getattr(t, fname) <= 0:
                errors.append(InvalidValue(f"{fname} must be > 0", t.name))
        if t.swap_cache_bytes <= 0 or t.swap_cache_bytes % PAGE_SIZE:
            errors.append(InvalidValue("swap_cache_bytes must be a positive multiple of 4096", t.name))
        elif t.swap_cache_bytes >= t.local_mem_pages * PAGE_SIZE:
            errors.append(
                CacheExceedsLocalMemory(
                    f"swap cache {t.swap_cache_bytes}B leaves no mappable memory in "
                    f"{t.local_mem_pages} pages",
                    t.name,
                )
            )
        if not 0 < t.reservation_removal_fraction <= 1:
            errors.append(InvalidValue("reservation_removal_fraction must be in (0,1]", t.name))
        if t.allocator not in ALLOCATORS:
            errors.append(InvalidValue(f"allocator must be one of {ALLOCATORS}", t.name))
        if t.prefetcher not in PREFETCHERS:
            errors.append(InvalidValue(f"prefetcher must be one of {PREFETCHERS}", t.name))
        if t.profile not in PROFILES:
            errors.append(InvalidValue(f"profile must be one of {PROFILES}", t.name))

    workloads = []
    for w in raw.get("workloads") or []:
        wc = _build(WorkloadConfig, w, "workload", errors, w.get("tenant") if isinstance(w, dict) else None)
        if wc is None:
            continue
        if wc.tenant not in names:
            errors.append(InvalidValue(f"workload refers to unknown tenant {wc.tenant!r}", wc.tenant))
        if wc.kind not in WORKLOAD_KINDS:
            errors.append(InvalidValue(f"workload kind must be one of {WORKLOAD_KINDS}", wc.tenant))
        if wc.threads <= 0 or wc.rate <= 0:
            errors.append(InvalidValue("threads and rate must be > 0", wc.tenant))
        if not 0 <= wc.write_ratio <= 1:
            errors.append(InvalidValue("write_ratio must be in [0,1]", wc.tenant))
        workloads.append(wc)

    sections = {}
    for key, cls in _SECTIONS.items():
        sections[key] = _build(cls, raw.get(key) or {}, key, errors) or cls()

    mode = raw.get("mode", "isolated")
    if mode not in MODES:
        errors.append(InvalidValue(f"mode must be one of {MODES}"))
    sched = sections["scheduler"]
    if not sched.mode:
        sched.mode = "canvas" if mode == "isolated" else "fastswap-baseline"
    if sched.mode not in SCHEDULER_MODES:
        errors.append(InvalidValue(f"scheduler.mode must be one of {SCHEDULER_MODES}"))
    if sections["prefetch"].shared_policy not in PREFETCHERS:
        errors.append(InvalidValue(f"prefetch.shared_policy must be one of {PREFETCHERS}"))
    if sections["prefetch"].ref_hops < 1:
        errors.append(InvalidValue("prefetch.ref_hops must be >= 1"))
    if sections["fabric"].bandwidth_bytes_per_s <= 0:
        errors.append(InvalidValue("fabric.bandwidth_bytes_per_s must be > 0"))

    duration = raw.get("duration_ns", 100_000_000)
    if not isinstance(duration, int) or duration < 0:
        errors.append(InvalidValue("duration_ns must be a non-negative integer"))
    batch = raw.get("cache_shrink_batch", DEFAULT_SHRINK_BATCH)
    if not isinstance(batch, int) or batch <= 0:
        errors.append(InvalidValue("cache_shrink_batch must be a positive integer"))

    if errors:
        raise ConfigError(errors)
    return ScenarioConfig(
        tenants=tenants,
        workloads=workloads,
        seed=int(raw.get("seed", 0)),
        duration_ns=duration,
        mode=mode,
        cache_shrink_batch=batch,
        fault_overhead_ns=int(raw.get("fault_overhead_ns", 1_000)),
        **sections,
    )


def load_config(path) -> ScenarioConfig:
    with open(path, encoding="utf-8") as fh:
        return validate_config(json.load(fh))


def dump_config(cfg: ScenarioConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
