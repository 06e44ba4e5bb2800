from hypothesis import given
from hypothesis import strategies as st

from farswap.model import PAGE_SIZE, PrefetchConfig
from farswap.prefetch import (
    ForwardingController,
    KernelPrefetcher,
    LargeArrayIndex,
    LeapPrefetcher,
    Policy,
    SummaryGraph,
    TenantPrefetcher,
    ThreadKind,
    ThreadPrefetcher,
    choose_policy,
    majority,
)

MB = 2**20


def test_majority():
    assert majority([1, 1, 2]) == 1
    assert majority([1, 2]) is None
    assert majority([]) is None


def test_kernel_unit_stride():
    k = KernelPrefetcher()
    k.prefetch(100)
    k.prefetch(101)
    out = k.prefetch(102)
    assert out and out == list(range(103, 103 + len(out)))


def test_kernel_constant_stride():
    k = KernelPrefetcher()
    k.prefetch(100)
    k.prefetch(110)
    out = k.prefetch(120)
    assert out[:2] == [130, 140]
    assert all(p % 10 == 0 for p in out)


def test_kernel_window_backs_off_to_zero():
    k = KernelPrefetcher(max_window=8)
    windows = [k.window]
    out = None
    for p in (100, 417, 23, 999):
        out = k.prefetch(p)
        windows.append(k.window)
    assert windows == [8, 4, 2, 1, 0]
    assert out == []


def test_forwarding_examples():
    fc = ForwardingController(threshold=2, window=3)
    assert [fc.update(c) for c in (0, 0, 0)] == [False, False, True]
    fc = ForwardingController(2, 3)
    assert [fc.update(c) for c in (0, 0, 5)] == [False, False, False]
    fc = ForwardingController(2, 3)
    for c in (0, 0, 0):
        fc.update(c)
    assert fc.forwarding
    assert fc.update(4) is False


@given(st.lists(st.integers(0, 5), max_size=60), st.integers(1, 4), st.integers(1, 5))
def test_forwarding_matches_rule(counts, threshold, window):
    fc = ForwardingController(threshold, window)
    for i, c in enumerate(counts):
        got = fc.update(c)
        tail = counts[max(0, i - window + 1) : i + 1]
        assert got == (len(tail) == window and all(x < threshold for x in tail))


def test_reference_edges():
    g = SummaryGraph(group_pages=16)
    grp = 16 * PAGE_SIZE
    assert not g.record_reference(0, 5 * PAGE_SIZE)
    assert g.record_reference(0, 3 * grp)
    assert not g.record_reference(8, 3 * grp + 4)
    assert g.edge_count() == 1


def _chain(g, groups):
    grp = g.group_pages * PAGE_SIZE
    for a, b in zip(groups, groups[1:]):
        g.record_reference(a * grp, b * grp)


def test_reachable_depth_cap_and_cycles():
    g = SummaryGraph()
    _chain(g, [0, 1, 2, 3, 4])
    assert g.reachable(0, hops=3) == [1, 2, 3]
    assert g.reachable(9, hops=3) == []
    g = SummaryGraph()
    _chain(g, [0, 1, 0])
    assert g.reachable(0, hops=3) == [1]


def test_reference_prefetch_filters_candidates():
    g = SummaryGraph(group_pages=4)
    _chain(g, [0, 5])
    out = g.prefetch(1, lambda p: p != 21, cap=32)
    assert out == [20, 22, 23]


def test_thread_prefetch_per_thread_strides():
    tp = ThreadPrefetcher(ring=32, window=4)
    leap = LeapPrefetcher(history=32)
    a, b = 1000, 50_000
    outs = {}
    for i in range(12):
        pa, pb = a + 3 * i, b + 7 * i
        outs[0] = tp.prefetch(0, pa)
        outs[1] = tp.prefetch(1, pb)
        leap.observe(pa)
        leap.observe(pb)
    assert outs[0] == [pa + 3 * k for k in range(1, 5)]
    assert outs[1] == [pb + 7 * k for k in range(1, 5)]
    assert leap.trend() is None


def test_thread_prefetch_stride_four_and_aux():
    tp = ThreadPrefetcher(window=3)
    for p in (0, 4, 8, 12):
        out = tp.prefetch(1, p)
    assert out == [16, 20, 24]
    tp.tag(2, ThreadKind.AUX)
    for p in (0, 4, 8, 12):
        assert tp.prefetch(2, p) == []
    assert 2 not in tp.rings


def test_policy_selection():
    arrays = LargeArrayIndex(MB)
    arrays.insert(0, 2 * MB, 1)
    assert choose_policy("managed", MB, 8, arrays) is Policy.THREAD
    assert choose_policy("managed", 4 * MB, 8, arrays) is Policy.REFERENCE
    assert choose_policy("native", 4 * MB, 1, arrays) is Policy.THREAD


def test_large_array_index():
    idx = LargeArrayIndex(MB)
    assert not idx.insert(0, MB - 1, 1)
    assert idx.insert(10 * MB, 2 * MB, 2)
    assert idx.lookup(11 * MB) == (10 * MB, 2 * MB, 2)
    assert idx.lookup(12 * MB) is None
    # reallocation over the same range replaces the stale record
    assert idx.insert(11 * MB, 4 * MB, 3)
    assert len(idx) == 1
    assert idx.lookup(10 * MB) is None


def test_leap_examples():
    lp = LeapPrefetcher(window=4, fallback=8)
    for p in (10, 12, 14, 16):
        out = lp.prefetch(p)
    assert out == [18, 20, 22, 24]
    lp = LeapPrefetcher(fallback=8)
    for p in (100, 417, 23, 999, 5):
        out = lp.prefetch(p)
    assert out == list(range(6, 14))


def test_tenant_prefetcher_none_and_leap():
    cfg = PrefetchConfig()
    none = TenantPrefetcher("none", cfg)
    assert none.on_fault(0, 10, True, lambda p: True).kernel == []
    leap = TenantPrefetcher("leap", cfg)
    d = leap.on_fault(0, 10, True, lambda p: True)
    assert len(d.kernel) == cfg.leap_fallback_count and not d.forwarding


def test_two_tier_forwards_after_three_weak_faults():
    tp = TenantPrefetcher("two-tier", PrefetchConfig(), "native")
    tp.tag_thread(0, ThreadKind.APP)
    decisions = [tp.on_fault(0, p, True, lambda p: True) for p in (5, 900, 77, 3000, 12)]
    assert not decisions[0].forwarding
    assert any(d.forwarding for d in decisions[2:])
    assert decisions[-1].policy is Policy.THREAD
