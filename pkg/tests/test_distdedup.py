from __future__ import annotations

import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memsci.conf import bits_to_words, keys_to_words, order_keys
from memsci.distdedup import (
    Fabric,
    FabricError,
    balance_metrics,
    compute_splitters,
    dedup_bench,
    merge_unique,
    partition_bounds,
    regular_sample,
    run_distributed_dedup,
    sample_indices,
    synthetic_keys,
)
from memsci.oracle import naive_dedup


def keys_of(ints):
    return order_keys(bits_to_words(ints))


def test_sample_indices():
    assert sample_indices(8, 4) == [0, 2, 4, 6]
    assert sample_indices(3, 4) == [0, 1, 2]
    assert sample_indices(0, 4) == []
    with pytest.raises(ValueError):
        sample_indices(5, 0)


def test_regular_sample_values():
    k = keys_of(range(10, 18))
    assert regular_sample(k, 4).tolist() == k[[0, 2, 4, 6]].tolist()
    assert len(regular_sample(k[:0], 4)) == 0


def test_compute_splitters():
    s = keys_of(range(1, 9))
    assert compute_splitters(s[::-1], 2).tolist() == keys_of([5]).tolist()
    assert len(compute_splitters(s, 1)) == 0
    same = keys_of([7] * 6)
    assert compute_splitters(same, 4).tolist() == keys_of([7] * 3).tolist()


def test_partition_bounds():
    data = keys_of([1, 2, 3, 4])
    assert partition_bounds(data, keys_of([3])).tolist() == [0, 2, 4]
    assert partition_bounds(data[:0], keys_of([3, 9])).tolist() == [0, 0, 0, 0]
    assert partition_bounds(data, keys_of([10])).tolist() == [0, 4, 4]


def test_balance_metrics_examples():
    m = balance_metrics([100] * 4, 1.0, 400)
    assert (m.max_min_ratio, m.cv, m.throughput_items_per_sec) == (1.0, 0.0, 400.0)
    m = balance_metrics([90, 110], 2.0, 200)
    assert m.max_min_ratio == pytest.approx(110 / 90) and m.cv == pytest.approx(0.1)
    m = balance_metrics([0, 10], 1.0, 10)
    assert m.degenerate and m.max_min_ratio == float("inf")
    assert m.to_json()["max_min_ratio"] is None
    with pytest.raises(ValueError):
        balance_metrics([], 1.0, 0)


def test_small_two_rank_example():
    a, b, c = bits_to_words([3, 5, 9])
    res = run_distributed_dedup([np.stack([a, b, b]), np.stack([b, c])], samples=2)
    union = res.union()
    assert union.tolist() == [a.tolist(), b.tolist(), c.tolist()]
    assert sum(len(s) for s in res.slices) == 3


def test_single_rank_is_sort_unique(rng):
    data = rng.integers(0, 50, size=(200, 2), dtype=np.uint64)
    res = run_distributed_dedup([data])
    assert np.array_equal(res.union(), naive_dedup([data]))


def check_slices(res, buffers):
    assert np.array_equal(res.union(), naive_dedup(buffers))
    keys = [order_keys(s) for s in res.slices]
    for k in keys:
        assert (k[1:] > k[:-1]).all()
    nonempty = [k for k in keys if len(k)]
    for lo, hi in zip(nonempty, nonempty[1:]):
        assert lo[-1] < hi[0]


@given(
    st.integers(1, 6),
    st.lists(st.lists(st.integers(0, 12), max_size=30), min_size=1, max_size=6),
    st.integers(1, 8),
)
def test_small_alphabet_correctness(_, lists, samples):
    buffers = [bits_to_words(x) if x else np.zeros((0, 2), np.uint64) for x in lists]
    res = run_distributed_dedup(buffers, samples)
    check_slices(res, buffers)
    assert res.exchanged_items <= res.local_unique_items


def test_determinism(rng):
    buffers = np.array_split(synthetic_keys(20_000, "zipf:1.3", 4), 4)
    a = run_distributed_dedup(buffers)
    b = run_distributed_dedup(buffers)
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.slices, b.slices))


def test_uniform_balance():
    buffers = np.array_split(synthetic_keys(100_000, "uniform", 2), 8)
    res = run_distributed_dedup(buffers, 64)
    check_slices(res, buffers)
    assert res.metrics.max_min_ratio <= 1.25 and res.metrics.cv <= 0.05


def test_synthetic_keys():
    z = synthetic_keys(1000, "zipf:1.1", 0)
    assert z.shape == (1000, 2) and len(naive_dedup([z])) < 1000
    assert np.array_equal(z, synthetic_keys(1000, "zipf:1.1", 0))
    with pytest.raises(ValueError):
        synthetic_keys(10, "zipf:0.9")
    with pytest.raises(ValueError):
        synthetic_keys(10, "normal")


def test_rank_dropout_aborts(monkeypatch):
    import memsci.distdedup as dd

    real = dd.merge_unique
    buffers = np.array_split(synthetic_keys(3000, "uniform", 1), 3)
    fabric = Fabric(3, timeout=5)
    calls = {"n": 0}

    def one_bad(runs):
        calls["n"] += 1
        if calls["n"] == 1:
            raise RuntimeError("rank lost")
        return real(runs)

    monkeypatch.setattr(dd, "merge_unique", one_bad)
    with pytest.raises(FabricError, match="rank lost"):
        run_distributed_dedup(buffers, fabric=fabric)


def test_fabric_abort_breaks_waiters():
    fabric = Fabric(2, timeout=5)
    errors = []

    def waiter():
        try:
            fabric.gather(1, "x")
        except FabricError as exc:
            errors.append(str(exc))

    t = threading.Thread(target=waiter)
    t.start()
    fabric.abort("peer gone")
    t.join()
    assert errors == ["peer gone"]


def test_merge_unique_and_keys_round_trip():
    k = keys_of([4, 1, 4, 9])
    merged = merge_unique([k[:2], k[2:]])
    assert keys_to_words(merged).tolist() == bits_to_words([1, 4, 9]).tolist()
    assert len(merge_unique([])) == 0


def test_bench_report_fields():
    rep = dedup_bench(4, 16, 20_000, "zipf:1.1", 0)
    assert rep["schema"] == 1 and rep["ranks"] == 4
    assert sum(rep["per_rank_counts"]) == rep["unique"]
    assert rep["max_min_ratio"] >= 1 and rep["cv"] >= 0
