"""Sort-based global de-duplication by regular sampling over logical ranks.

Each rank sorts and locally uniquifies its buffer, picks ``S`` regularly
spaced pivots, and sends them to the root.  The root sorts the pooled sample
and broadcasts ``R - 1`` equi-spaced splitters.  Every rank cuts its sorted
buffer with lower-bound binary searches, one all-to-all exchange routes
partition ``j`` to rank ``j``, and each rank merges what it received and drops
duplicates.  Rank ``j`` ends up owning keys ``k`` with
``splitter[j-1] <= k < splitter[j]``.

Ranks are threads joined by :class:`Fabric`; the only cross-rank interactions
are gather, broadcast and all-to-all, each a full barrier.
"""

from __future__ import annotations

import json
import math
import threading
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .conf import WORDS, keys_to_words, order_keys

DEFAULT_SAMPLES = 64


class FabricError(RuntimeError):
    """A rank failed mid-round; the whole round is abandoned."""


class Fabric:
    """In-process collectives for ``R`` ranks running on threads."""

    def __init__(self, ranks: int, timeout: float | None = 60.0):
        if ranks < 1:
            raise ValueError("need at least one rank")
        self.ranks = ranks
        self.timeout = timeout
        self._barrier = threading.Barrier(ranks, timeout=timeout)
        self._slots: list = [None] * ranks
        self.reason: str | None = None
        self.sent_items = [0] * ranks

    def _sync(self):
        try:
            self._barrier.wait()
        except threading.BrokenBarrierError:
            raise FabricError(self.reason or "fabric barrier broken") from None

    def abort(self, reason: str):
        if self.reason is None:
            self.reason = reason
        self._barrier.abort()

    def gather(self, rank: int, obj, root: int = 0):
        self._slots[rank] = obj
        self._sync()
        out = list(self._slots) if rank == root else None
        self._sync()
        return out

    def bcast(self, rank: int, obj, root: int = 0):
        if rank == root:
            self._slots[root] = obj
        self._sync()
        out = self._slots[root]
        self._sync()
        return out

    def alltoall(self, rank: int, parts: Sequence):
        if len(parts) != self.ranks:
            raise ValueError("alltoall needs one part per rank")
        self.sent_items[rank] = sum(len(p) for j, p in enumerate(parts) if j != rank)
        self._slots[rank] = list(parts)
        self._sync()
        out = [self._slots[src][rank] for src in range(self.ranks)]
        self._sync()
        return out


@dataclass
class BalanceMetrics:
    per_rank_counts: list[int]
    max_min_ratio: float
    cv: float
    throughput_items_per_sec: float
    degenerate: bool = False

    def to_json(self) -> dict:
        out = asdict(self)
        if math.isinf(self.max_min_ratio):
            out["max_min_ratio"] = None
        return out


def balance_metrics(per_rank_counts: Sequence[int], elapsed: float, total_in: int) -> BalanceMetrics:
    counts = np.asarray(per_rank_counts, dtype=float)
    if counts.size == 0:
        raise ValueError("no rank counts")
    lo, hi = counts.min(), counts.max()
    degenerate = lo == 0
    ratio = math.inf if degenerate else float(hi / lo)
    mean = counts.mean()
    cv = float(counts.std() / mean) if mean > 0 else 0.0
    throughput = total_in / elapsed if elapsed > 0 else math.inf
    return BalanceMetrics([int(c) for c in counts], ratio, cv, float(throughput), bool(degenerate))


# -- per-rank steps ---------------------------------------------------------
# These operate on order keys (fixed-width byte strings) so that numpy sort
# and searchsorted implement the global configuration order directly.

def regular_sample(sorted_keys: np.ndarray, samples: int) -> np.ndarray:
    """Pivots at ``k * (len // samples)``; short buffers are sampled whole."""
    return sorted_keys[np.asarray(sample_indices(len(sorted_keys), samples), dtype=np.int64)]


def sample_indices(n: int, samples: int) -> list[int]:
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if n == 0:
        return []
    if n >= samples:
        return [k * (n // samples) for k in range(samples)]
    return sorted({min(k, n - 1) for k in range(samples)})


def compute_splitters(all_samples: np.ndarray, ranks: int) -> np.ndarray:
    if ranks < 1:
        raise ValueError("ranks must be >= 1")
    s = np.sort(np.asarray(all_samples), kind="stable")
    if ranks == 1 or len(s) == 0:
        return s[:0]
    step = len(s) // ranks
    return s[[j * step for j in range(1, ranks)]]


def partition_bounds(sorted_keys: np.ndarray, splitters: np.ndarray) -> np.ndarray:
    """Offsets ``o_0 = 0 <= ... <= o_R = len``; segment ``j`` goes to rank ``j``."""
    inner = np.searchsorted(sorted_keys, splitters, side="left") if len(splitters) else np.zeros(0, np.int64)
    return np.concatenate([[0], inner, [len(sorted_keys)]]).astype(np.int64)


def merge_unique(runs: Sequence[np.ndarray]) -> np.ndarray:
    runs = [r for r in runs if len(r)]
    if not runs:
        return np.zeros(0, dtype=f"S{8 * WORDS}")
    return np.unique(np.concatenate(runs))


@dataclass
class DedupResult:
    slices: list[np.ndarray]  # per-rank sorted unique word arrays
    metrics: BalanceMetrics
    exchanged_items: int
    local_unique_items: int
    splitters: np.ndarray = field(repr=False, default=None)

    def union(self) -> np.ndarray:
        if not self.slices:
            return np.zeros((0, WORDS), np.uint64)
        return np.concatenate(self.slices)


def _rank_main(rank, fabric: Fabric, keys: np.ndarray, samples: int, root: int, out: dict):
    ranks = fabric.ranks
    local = np.unique(keys)
    out["local", rank] = len(local)
    pivots = regular_sample(local, samples)
    pooled = fabric.gather(rank, pivots, root)
    splitters = compute_splitters(np.concatenate(pooled), ranks) if rank == root else None
    splitters = fabric.bcast(rank, splitters, root)
    bounds = partition_bounds(local, splitters)
    if len(bounds) < ranks + 1:  # no samples anywhere: every buffer is empty
        bounds = np.concatenate([bounds, np.full(ranks + 1 - len(bounds), len(local))])
    parts = [local[bounds[j] : bounds[j + 1]] for j in range(ranks)]
    received = fabric.alltoall(rank, parts)
    out["slice", rank] = merge_unique(received)
    if rank == root:
        out["splitters"] = splitters


def run_distributed_dedup(
    buffers: Sequence[np.ndarray],
    samples: int = DEFAULT_SAMPLES,
    root: int = 0,
    fabric: Fabric | None = None,
) -> DedupResult:
    """De-duplicate ``R`` word-array buffers; returns rank-ordered unique slices."""
    ranks = len(buffers)
    if ranks < 1:
        raise ValueError("need at least one rank buffer")
    if samples < 1:
        raise ValueError("samples must be >= 1")
    fabric = fabric or Fabric(ranks)
    if fabric.ranks != ranks:
        raise ValueError("fabric size does not match buffer count")
    keys = [order_keys(b) for b in buffers]
    total_in = sum(len(k) for k in keys)
    out: dict = {}
    errors: list[str] = []

    def target(rank):
        try:
            _rank_main(rank, fabric, keys[rank], samples, root, out)
        except FabricError as exc:
            errors.append(f"rank {rank}: {exc}")
        except Exception as exc:  # a rank dropping out aborts everyone
            errors.append(f"rank {rank}: {type(exc).__name__}: {exc}")
            fabric.abort(f"rank {rank} dropped out: {exc}")

    start = time.perf_counter()
    if ranks == 1:
        target(0)
    else:
        threads = [threading.Thread(target=target, args=(r,), daemon=True) for r in range(ranks)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
    elapsed = time.perf_counter() - start
    if errors:
        raise FabricError("dedup round aborted; " + "; ".join(sorted(errors)))

    slices = [keys_to_words(out["slice", r]) for r in range(ranks)]
    metrics = balance_metrics([len(s) for s in slices], elapsed, total_in)
    return DedupResult(
        slices,
        metrics,
        exchanged_items=sum(fabric.sent_items),
        local_unique_items=sum(out["local", r] for r in range(ranks)),
        splitters=out.get("splitters"),
    )


# -- synthetic key streams --------------------------------------------------

def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = x + np.uint64(0x9E3779B97F4A7C15)
    x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def synthetic_keys(n: int, dist: str = "uniform", seed: int = 0) -> np.ndarray:
    """``(n, 2)`` 128-bit keys; ``dist`` is ``uniform`` or ``zipf:<theta>``.

    Zipf draws are item ranks, hashed to keys, so popular items repeat.
    """
    rng = np.random.default_rng(seed)
    if dist == "uniform":
        return rng.integers(0, 2**64, size=(n, WORDS), dtype=np.uint64)
    if dist.startswith("zipf:"):
        theta = float(dist.split(":", 1)[1])
        if theta <= 1.0:
            raise ValueError("zipf exponent must exceed 1")
        ranks = rng.zipf(theta, n).astype(np.uint64)
        with np.errstate(over="ignore"):
            lo = _splitmix64(ranks)
            hi = _splitmix64(ranks ^ np.uint64(0x5851F42D4C957F2D))
        return np.stack([lo, hi], axis=1)
    raise ValueError(f"unknown distribution {dist!r}")


def dedup_bench(ranks: int, samples: int, keys: int, dist: str, seed: int = 0) -> dict:
    data = synthetic_keys(keys, dist, seed)
    buffers = np.array_split(data, ranks)
    result = run_distributed_dedup(buffers, samples)
    report = {
        "schema": 1,
        "ranks": ranks,
        "samples": samples,
        "keys": keys,
        "dist": dist,
        "unique": int(sum(len(s) for s in result.slices)),
        "exchanged_items": result.exchanged_items,
    }
    report.update(result.metrics.to_json())
    return report


def dumps(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
