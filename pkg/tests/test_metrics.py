import pytest
from hypothesis import given
from hypothesis import strategies as st

from farswap.metrics import (
    DimensionMismatch,
    LatencyHistogram,
    ZeroWeightError,
    accuracy,
    contribution,
    exact_percentile,
    wmmr,
)


def test_wmmr_examples():
    assert wmmr([100, 200], [1, 2]) == 1.0
    assert wmmr([100, 100], [1, 2]) == 0.5
    assert wmmr([42], [3]) == 1.0


def test_wmmr_errors():
    with pytest.raises(DimensionMismatch):
        wmmr([1, 2], [1])
    with pytest.raises(ZeroWeightError):
        wmmr([1, 2], [1, 0])


def test_contribution_and_accuracy():
    assert contribution(0, 10) == 0.0
    assert contribution(0, 0) is None
    assert accuracy(50, 100) == 0.5
    assert accuracy(7, 7) == 1.0
    assert accuracy(0, 0) is None


def test_histogram_percentiles_bracket_samples():
    h = LatencyHistogram()
    for ns in range(1_000, 101_000, 1_000):
        h.add(ns)
    p50 = h.percentile(0.5)
    assert 50_000 <= p50 <= 50_000 * 1.4
    assert h.percentile(0.99) >= 99_000
    assert h.to_dict()["count"] == 100


@given(st.lists(st.integers(1, 10**8), min_size=1, max_size=200))
def test_histogram_percentile_monotone(xs):
    h = LatencyHistogram()
    for x in xs:
        h.add(x)
    qs = [h.percentile(q) for q in (0.1, 0.5, 0.9, 0.99, 1.0)]
    assert qs == sorted(qs)
    assert qs[-1] >= min(max(xs), LatencyHistogram.upper_edges()[-1])


def test_exact_percentile():
    assert exact_percentile([], 0.5) is None
    assert exact_percentile([1, 2, 3], 0.5) == 2.0
