"""Metric definitions and fixed log-spaced latency histograms."""

from __future__ import annotations

import bisect
import math
from typing import Optional, Sequence

import numpy as np

from .model import SimError

HIST_LO_NS = 1_000
HIST_HI_NS = 100_000_000
HIST_BUCKETS = 60
# edges[i] is the upper bound of bucket i; samples above the last edge land in the last bucket
_EDGES = [int(round(x)) for x in np.logspace(math.log10(HIST_LO_NS), math.log10(HIST_HI_NS), HIST_BUCKETS)]


class DimensionMismatch(SimError):
    pass


class ZeroWeightError(SimError):
    pass


class LatencyHistogram:
    __slots__ = ("counts", "total", "sum_ns", "max_ns")

    def __init__(self) -> None:
        self.counts = [0] * HIST_BUCKETS
        self.total = 0
        self.sum_ns = 0
        self.max_ns = 0

    def add(self, ns: int) -> None:
        i = bisect.bisect_left(_EDGES, ns)
        self.counts[min(i, HIST_BUCKETS - 1)] += 1
        self.total += 1
        self.sum_ns += ns
        if ns > self.max_ns:
            self.max_ns = ns

    @staticmethod
    def upper_edges() -> list[int]:
        return list(_EDGES)

    def percentile(self, q: float) -> Optional[int]:
        """Upper edge of the bucket holding the q-quantile (monotone in q)."""
        if self.total == 0:
            return None
        rank = max(1, math.ceil(q * self.total))
        acc = 0
        for edge, c in zip(_EDGES, self.counts):
            acc += c
            if acc >= rank:
                return edge
        return _EDGES[-1]

    def mean(self) -> Optional[float]:
        return self.sum_ns / self.total if self.total else None

    def to_dict(self) -> dict:
        return {
            "count": self.total,
            "mean_ns": self.mean(),
            "max_ns": self.max_ns,
            "p50_ns": self.percentile(0.5),
            "p90_ns": self.percentile(0.9),
            "p99_ns": self.percentile(0.99),
            "buckets": self.counts,
        }


def wmmr(x: Sequence[float], w: Sequence[float]) -> float:
    """Weighted min-max ratio min(x_i/w_i) / max(x_i/w_i)."""
    if len(x) != len(w) or not x:
        raise DimensionMismatch(f"|x|={len(x)} |w|={len(w)}")
    if any(wi <= 0 for wi in w):
        raise ZeroWeightError("weights must be positive")
    shares = [xi / wi for xi, wi in zip(x, w)]
    hi = max(shares)
    if hi == 0:
        return 1.0
    return min(shares) / hi


def contribution(cache_hit_faults: int, total_faults: int) -> Optional[float]:
    """Fraction of page faults served by the swap cache; None when there were no faults."""
    if total_faults <= 0:
        return None
    return cache_hit_faults / total_faults


def accuracy(cache_hit_faults: int, total_prefetches: int) -> Optional[float]:
    """Prefetch hits per prefetch; None when nothing was prefetched."""
    if total_prefetches <= 0:
        return None
    return cache_hit_faults / total_prefetches


def exact_percentile(samples: Sequence[int], q: float) -> Optional[float]:
    if not samples:
        return None
    return float(np.percentile(np.asarray(samples), q * 100, method="linear"))
