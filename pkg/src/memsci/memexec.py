"""Budgeted, staged, triple-buffered batch execution with a spill store.

The fast memory tier (a GPU in the original setting) is modelled by
:class:`ResidentTracker`, an allocator wrapper that records every working
buffer and aborts on a budget overrun.  Cold data lives in a
:class:`SpillStore`.  Each stage streams its items in batches sized by
:func:`plan_batches`; with overlap enabled, batch ``i + 1`` is loaded and batch
``i - 1`` written back while batch ``i`` computes, so at most three batch
buffers are resident at once.
"""

from __future__ import annotations

import hashlib
import io
import os
import queue
import struct
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .conf import WORDS, searchsorted
from .genkernel import RecordBatch

BUFFER_MULTIPLICITY = 3
SPILL_MAGIC = b"SCISPL1\0"

_RECORD_DTYPE = np.dtype([("src", "<u8"), ("words", "<u8", (WORDS,)), ("elem", "<f8")])


class BudgetInfeasible(RuntimeError):
    """The budget cannot hold even a single item (or a barrier's working set)."""


class BudgetExceeded(RuntimeError):
    """Resident bytes passed the budget; indicates a planning bug."""


class SpillError(IOError):
    pass


@dataclass(frozen=True)
class MemoryBudget:
    budget_bytes: float
    reserved_bytes: int = 0

    def __post_init__(self):
        if not self.budget_bytes > self.reserved_bytes:
            raise BudgetInfeasible(
                f"budget {self.budget_bytes} B does not exceed reserved {self.reserved_bytes} B"
            )

    @classmethod
    def unlimited(cls, reserved_bytes: int = 0) -> "MemoryBudget":
        return cls(float("inf"), reserved_bytes)

    def with_reserved(self, reserved_bytes: int) -> "MemoryBudget":
        return MemoryBudget(self.budget_bytes, reserved_bytes)


@dataclass(frozen=True)
class BatchPlan:
    n_items: int
    item_bytes: int
    batch_size: int
    batch_count: int
    reserved_bytes: int = 0

    def bounds(self, i: int) -> tuple[int, int]:
        lo = i * self.batch_size
        return lo, min(lo + self.batch_size, self.n_items)

    @property
    def peak_bytes(self) -> int:
        return self.reserved_bytes + BUFFER_MULTIPLICITY * self.batch_size * self.item_bytes

    @property
    def sizes(self) -> list[int]:
        return [hi - lo for lo, hi in map(self.bounds, range(self.batch_count))]


def plan_batches(n_items: int, item_bytes: int, budget: MemoryBudget) -> BatchPlan:
    """Largest batch size whose triple-buffered peak fits the budget."""
    item_bytes = max(int(item_bytes), 1)
    free = budget.budget_bytes - budget.reserved_bytes
    if BUFFER_MULTIPLICITY * item_bytes > free:
        raise BudgetInfeasible(
            f"budget infeasible: reserved {budget.reserved_bytes} B + "
            f"{BUFFER_MULTIPLICITY} x {item_bytes} B exceeds {budget.budget_bytes} B"
        )
    if n_items <= 0:
        return BatchPlan(0, item_bytes, 1, 0, budget.reserved_bytes)
    fit = free // (BUFFER_MULTIPLICITY * item_bytes)
    size = int(min(n_items, fit))
    return BatchPlan(n_items, item_bytes, size, -(-n_items // size), budget.reserved_bytes)


def nbytes(obj: Any) -> int:
    if obj is None:
        return 0
    if isinstance(obj, np.ndarray):
        return obj.nbytes
    if isinstance(obj, RecordBatch):
        return obj.source_idx.nbytes + obj.targets.nbytes + obj.elements.nbytes
    if isinstance(obj, dict):
        return sum(nbytes(v) for v in obj.values())
    if isinstance(obj, (list, tuple)):
        return sum(nbytes(v) for v in obj)
    return 0


class ResidentTracker:
    """Accounts resident working-buffer bytes against the budget."""

    def __init__(self, budget_bytes: float = float("inf")):
        self.budget_bytes = budget_bytes
        self.current = 0
        self.peak = 0
        self._lock = threading.Lock()

    def alloc(self, n: int, what: str = "") -> int:
        with self._lock:
            if self.current + n > self.budget_bytes:
                raise BudgetExceeded(
                    f"{what or 'allocation'} of {n} B on top of {self.current} B exceeds {self.budget_bytes} B"
                )
            self.current += n
            self.peak = max(self.peak, self.current)
        return n

    def free(self, n: int):
        with self._lock:
            self.current -= n


# -- spill store ------------------------------------------------------------

def encode_segment(records: RecordBatch) -> bytes:
    arr = np.empty(len(records), dtype=_RECORD_DTYPE)
    arr["src"] = records.source_idx.astype(np.int64).view(np.uint64)
    arr["words"] = records.targets
    arr["elem"] = records.elements
    return SPILL_MAGIC + struct.pack("<QQ", WORDS, len(records)) + arr.tobytes()


def decode_segment(blob: bytes) -> RecordBatch:
    if blob[:8] != SPILL_MAGIC:
        raise SpillError("bad spill segment magic")
    words, count = struct.unpack_from("<QQ", blob, 8)
    if words != WORDS:
        raise SpillError(f"segment has {words} words per configuration, expected {WORDS}")
    if len(blob) != 24 + count * _RECORD_DTYPE.itemsize:
        raise SpillError("truncated spill segment")
    arr = np.frombuffer(blob, dtype=_RECORD_DTYPE, count=count, offset=24)
    return RecordBatch(
        arr["src"].astype(np.uint64).view(np.int64).copy(),
        np.ascontiguousarray(arr["words"]).astype(np.uint64),
        arr["elem"].astype(float),
    )


@dataclass
class _Segment:
    count: int
    digest: str
    offset: int = 0
    size: int = 0
    path: Path | None = None


class SpillStore:
    """Sealed, checksummed segments in an in-memory arena or a directory.

    Segments are grouped into named streams; ``read_range`` stitches a record
    range back together across segment boundaries.
    """

    def __init__(self, directory: str | os.PathLike | None = None):
        self.directory = Path(directory) if directory is not None else None
        if self.directory is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
        self._arena = io.BytesIO()
        self._streams: dict[str, list[_Segment]] = {}
        self._lock = threading.Lock()
        self.bytes_written = 0

    def append(self, stream: str, records: RecordBatch) -> int:
        blob = encode_segment(records)
        digest = hashlib.sha256(blob).hexdigest()
        with self._lock:
            segs = self._streams.setdefault(stream, [])
            seg = _Segment(len(records), digest, size=len(blob))
            try:
                if self.directory is None:
                    seg.offset = self._arena.seek(0, io.SEEK_END)
                    self._arena.write(blob)
                else:
                    seg.path = self.directory / f"{stream.replace('/', '_')}.{len(segs):06d}.spl"
                    seg.path.write_bytes(blob)
            except OSError as exc:
                raise SpillError(f"spill write failed: {exc}") from exc
            segs.append(seg)
            self.bytes_written += len(blob)
            return len(segs) - 1

    def _blob(self, seg: _Segment) -> bytes:
        try:
            if seg.path is None:
                with self._lock:
                    view = self._arena.getbuffer()
                    blob = bytes(view[seg.offset : seg.offset + seg.size])
                    del view
            else:
                blob = seg.path.read_bytes()
        except OSError as exc:
            raise SpillError(f"spill read failed: {exc}") from exc
        if hashlib.sha256(blob).hexdigest() != seg.digest:
            raise SpillError("spill segment checksum mismatch")
        return blob

    def read(self, stream: str, index: int) -> RecordBatch:
        return decode_segment(self._blob(self._streams[stream][index]))

    def read_bytes(self, stream: str, index: int) -> bytes:
        return self._blob(self._streams[stream][index])

    def segments(self, stream: str) -> int:
        return len(self._streams.get(stream, []))

    def count(self, stream: str) -> int:
        return sum(s.count for s in self._streams.get(stream, []))

    def read_range(self, stream: str, start: int, stop: int) -> RecordBatch:
        parts = []
        pos = 0
        for i, seg in enumerate(self._streams.get(stream, [])):
            lo, hi = pos, pos + seg.count
            pos = hi
            if hi <= start or lo >= stop or seg.count == 0:
                continue
            rec = self.read(stream, i)
            parts.append(rec.slice(max(start, lo) - lo, min(stop, hi) - lo))
        return RecordBatch.concat(parts)

    def read_all(self, stream: str) -> RecordBatch:
        return RecordBatch.concat([self.read(stream, i) for i in range(self.segments(stream))])

    def drop(self, prefix: str = ""):
        with self._lock:
            for name in [s for s in self._streams if s.startswith(prefix)]:
                for seg in self._streams.pop(name):
                    if seg.path is not None:
                        seg.path.unlink(missing_ok=True)


# -- staged execution -------------------------------------------------------

@dataclass
class StageTrace:
    """Per-batch lane timings plus peak resident bytes."""

    events: list[tuple[str, int, int, str, float, float]] = field(default_factory=list)
    peak_bytes: int = 0
    budget_bytes: float = float("inf")
    batches: dict[str, int] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, stage: str, rank: int, batch: int, lane: str, t0: float, t1: float):
        with self._lock:
            self.events.append((stage, rank, batch, lane, t0, t1))

    def merge(self, other: "StageTrace"):
        self.events.extend(other.events)
        self.peak_bytes = max(self.peak_bytes, other.peak_bytes)
        for k, v in other.batches.items():
            self.batches[k] = self.batches.get(k, 0) + v


@dataclass
class RankWork:
    """One rank's share of a stage: ``n_items`` streamed through three lanes.

    ``load(lo, hi)`` brings items in, ``compute(i, data)`` produces a result,
    ``writeback(i, data, result)`` consumes it.  Results must not depend on
    which lane ran concurrently with which.
    """

    n_items: int
    item_bytes: int
    load: Callable[[int, int], Any]
    compute: Callable[[int, Any], Any]
    writeback: Callable[[int, Any, Any], None] | None = None
    reserved_bytes: int = 0


@dataclass
class Stage:
    name: str
    work: Callable[[], Sequence[RankWork]]
    barrier: Callable[[list[ResidentTracker]], None] | None = None


def run_batches(
    stage: str,
    rank: int,
    plan: BatchPlan,
    work: RankWork,
    tracker: ResidentTracker,
    trace: StageTrace,
    overlap: bool = True,
):
    """Stream ``plan`` through load / compute / writeback lanes."""
    count = plan.batch_count
    if count == 0:
        return
    clock = time.perf_counter

    def do_load(i):
        lo, hi = plan.bounds(i)
        t0 = clock()
        data = work.load(lo, hi)
        held = tracker.alloc(nbytes(data), f"{stage} load {i}")
        trace.record(stage, rank, i, "load", t0, clock())
        return data, held

    def do_compute(i, data):
        t0 = clock()
        result = work.compute(i, data)
        held = tracker.alloc(nbytes(result), f"{stage} compute {i}")
        trace.record(stage, rank, i, "compute", t0, clock())
        return result, held

    def do_writeback(i, data, result, held):
        t0 = clock()
        if work.writeback is not None:
            work.writeback(i, data, result)
        tracker.free(held)
        trace.record(stage, rank, i, "writeback", t0, clock())

    if not overlap:
        for i in range(count):
            data, h1 = do_load(i)
            result, h2 = do_compute(i, data)
            do_writeback(i, data, result, h1 + h2)
        return

    slots = threading.Semaphore(BUFFER_MULTIPLICITY)
    loaded: queue.Queue = queue.Queue()
    done: queue.Queue = queue.Queue()
    failure: list[BaseException] = []
    stop = threading.Event()

    def loader():
        try:
            for i in range(count):
                slots.acquire()
                if stop.is_set():
                    return
                loaded.put((i, *do_load(i)))
        except BaseException as exc:
            failure.append(exc)
            stop.set()
            loaded.put(None)

    def writer():
        try:
            for _ in range(count):
                item = done.get()
                if item is None:
                    return
                do_writeback(*item)
                slots.release()
        except BaseException as exc:
            failure.append(exc)
            stop.set()
            slots.release()

    threads = [threading.Thread(target=loader, daemon=True), threading.Thread(target=writer, daemon=True)]
    for t in threads:
        t.start()
    try:
        for _ in range(count):
            item = loaded.get()
            if item is None or stop.is_set():
                break
            i, data, h1 = item
            result, h2 = do_compute(i, data)
            done.put((i, data, result, h1 + h2))
    except BaseException as exc:
        failure.append(exc)
        stop.set()
    finally:
        if stop.is_set():
            done.put(None)
            for _ in range(BUFFER_MULTIPLICITY):
                slots.release()
        for t in threads:
            t.join()
    if failure:
        raise failure[0]


def run_pipeline(
    stages: Sequence[Stage],
    budget: MemoryBudget,
    ranks: int = 1,
    overlap: bool = True,
    trackers: list[ResidentTracker] | None = None,
) -> StageTrace:
    """Run stages in order; each stage's barrier sees every rank's tracker.

    Every rank gets its own tracker and the same ``budget``; the returned
    trace reports the largest per-rank peak.
    """
    trackers = trackers or [ResidentTracker(budget.budget_bytes) for _ in range(ranks)]
    trace = StageTrace(budget_bytes=budget.budget_bytes)
    for stage in stages:
        works = stage.work()
        if len(works) != len(trackers):
            raise ValueError(f"stage {stage.name} produced {len(works)} rank works for {len(trackers)} ranks")
        for rank, (work, tracker) in enumerate(zip(works, trackers)):
            plan = plan_batches(work.n_items, work.item_bytes, budget.with_reserved(work.reserved_bytes))
            held = tracker.alloc(work.reserved_bytes, f"{stage.name} reserved")
            try:
                run_batches(stage.name, rank, plan, work, tracker, trace, overlap)
            finally:
                tracker.free(held)
            trace.batches[stage.name] = trace.batches.get(stage.name, 0) + plan.batch_count
        if stage.barrier is not None:
            stage.barrier(trackers)
    trace.peak_bytes = max(t.peak for t in trackers)
    return trace


def jit_reverse_index(targets: np.ndarray, unique_sorted: np.ndarray) -> np.ndarray:
    """Position of every target in the sorted unique set (binary search)."""
    targets = np.asarray(targets, dtype=np.uint64).reshape(-1, WORDS)
    idx = searchsorted(unique_sorted, targets)
    found = idx < len(unique_sorted)
    found[found] = (unique_sorted[idx[found]] == targets[found]).all(axis=1)
    if not found.all():
        raise LookupError(f"{int((~found).sum())} targets missing from the unique set")
    return idx
