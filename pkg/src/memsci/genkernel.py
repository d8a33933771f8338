"""Coupled-configuration generation over the virtual excitation-id space.

Every source configuration owns ``n_single + n_double`` virtual ids.  An id
selects an occupied orbital (or occupied pair) and a slot of the matching
excitation-table row; pads and targets already occupied in the source are
discarded, the exact signed matrix element is computed, and records with
``|element| > eps`` survive.  Work is split into chunks of sources; each chunk
compacts its survivors into a gap-free private buffer and the concatenated
result is put in canonical ``(source_idx, target)`` order, so output does not
depend on chunking or worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .conf import (
    WORDS,
    Configuration,
    OrbitalSpace,
    from_words,
    occupancy,
    order_keys,
    orbital_masks,
    sort_unique,
    to_words,
)
from .hamiltonian import PAD, ExcitationTables, IntegralStore, pair_index

RECORD_BYTES = 8 + 8 * WORDS + 8


class CoupledRecord(NamedTuple):
    source_idx: int
    target: Configuration
    element: float


@dataclass
class RecordBatch:
    """Columnar stream of coupled records."""

    source_idx: np.ndarray  # int64 (N,)
    targets: np.ndarray  # uint64 (N, WORDS)
    elements: np.ndarray  # float64 (N,)

    @classmethod
    def empty(cls) -> "RecordBatch":
        return cls(np.zeros(0, np.int64), np.zeros((0, WORDS), np.uint64), np.zeros(0))

    @classmethod
    def concat(cls, batches: Sequence["RecordBatch"]) -> "RecordBatch":
        batches = [b for b in batches if len(b)]
        if not batches:
            return cls.empty()
        return cls(
            np.concatenate([b.source_idx for b in batches]),
            np.concatenate([b.targets for b in batches]),
            np.concatenate([b.elements for b in batches]),
        )

    def __len__(self) -> int:
        return len(self.source_idx)

    @property
    def nbytes(self) -> int:
        return len(self) * RECORD_BYTES

    def take(self, idx) -> "RecordBatch":
        return RecordBatch(self.source_idx[idx], self.targets[idx], self.elements[idx])

    def slice(self, start: int, stop: int) -> "RecordBatch":
        return self.take(slice(start, stop))

    def canonical_order(self) -> "RecordBatch":
        keys = order_keys(self.targets)
        order = np.lexsort((keys, self.source_idx))
        return self.take(order)

    def records(self, m: int) -> list[CoupledRecord]:
        return [
            CoupledRecord(int(s), t, float(e))
            for s, t, e in zip(self.source_idx, from_words(self.targets, m), self.elements)
        ]

    def tobytes(self) -> bytes:
        return self.source_idx.tobytes() + self.targets.tobytes() + self.elements.tobytes()


@dataclass(frozen=True)
class VirtualSpace:
    n_single: int
    n_double: int
    max_single_size: int
    max_double_size: int

    @property
    def total(self) -> int:
        return self.n_single + self.n_double


def virtual_space(n_elec: int, max_single_size: int, max_double_size: int) -> VirtualSpace:
    return VirtualSpace(
        n_elec * max_single_size,
        n_elec * (n_elec - 1) // 2 * max_double_size,
        max_single_size,
        max_double_size,
    )


def virtual_space_for(space: OrbitalSpace, tables: ExcitationTables) -> VirtualSpace:
    if tables.m != space.m:
        raise ValueError(f"tables built for m={tables.m}, space has m={space.m}")
    return virtual_space(space.n_elec, tables.max_single_size, tables.max_double_size)


def decompose_virtual_id(vid: int, vs: VirtualSpace) -> tuple[str, int, int]:
    """Map a virtual id to ``(kind, electron-or-pair index, table slot)``."""
    if not 0 <= vid < vs.total:
        raise IndexError(f"virtual id {vid} outside [0, {vs.total})")
    if vid < vs.n_single:
        return "single", vid // vs.max_single_size, vid % vs.max_single_size
    vid -= vs.n_single
    return "double", vid // vs.max_double_size, vid % vs.max_double_size


def compact(mask: np.ndarray, *arrays: np.ndarray) -> list[np.ndarray]:
    """Gap-free gather of the rows selected by ``mask`` via exclusive prefix sum."""
    flat_mask = mask.ravel()
    dest = np.cumsum(flat_mask) - 1
    count = int(dest[-1]) + 1 if dest.size else 0
    out = []
    for arr in arrays:
        flat = np.broadcast_to(arr, mask.shape).ravel()
        buf = np.empty(count, dtype=flat.dtype)
        buf[dest[flat_mask]] = flat[flat_mask]
        out.append(buf)
    return out


class _Kernel:
    """Read-only per-(tables, integrals) state shared by worker threads."""

    def __init__(self, tables: ExcitationTables, ints: IntegralStore, space: OrbitalSpace):
        if tables.m != space.m or ints.m != space.m:
            raise ValueError("tables, integrals and orbital space disagree on m")
        self.m = space.m
        self.n = space.n_elec
        self.tables = tables
        self.h_spin = ints.h_spin
        self.mean_field = ints.mean_field
        self.masks = orbital_masks(self.m)
        self.pairs = np.triu_indices(self.n, 1)

    def run(self, words: np.ndarray, offset: int, eps: float) -> RecordBatch:
        m, n = self.m, self.n
        c = len(words)
        occ = occupancy(words, m)
        if not (occ.sum(axis=1) == n).all():
            raise ValueError("source outside the particle sector")
        orbs = np.nonzero(occ)[1].reshape(c, n)
        # below[c, x] = occupied orbitals with index < x
        below = np.zeros((c, m + 1), dtype=np.int64)
        np.cumsum(occ, axis=1, out=below[:, 1:])
        rows = np.arange(c)[:, None]

        # singles: (c, n, Ls)
        t = self.tables
        P = orbs[:, :, None]
        A = t.singles_target[orbs]
        valid = A != PAD
        A_safe = np.where(valid, A, 0)
        valid &= ~occ[rows[:, :, None], A_safe]
        elem = self.h_spin[P, A_safe]
        mf = self.mean_field
        for k in range(m):
            elem = elem + occ[:, k][:, None, None] * mf[P, A_safe, k]
        lo, hi = np.minimum(P, A_safe), np.maximum(P, A_safe)
        between = below[rows[:, :, None], hi] - below[rows[:, :, None], lo + 1]
        elem = np.where(between & 1, -elem, elem)
        valid &= np.abs(elem) > eps
        src = rows[:, :, None]
        s_src, s_p, s_a, s_el = compact(valid, src, P, A_safe, elem)
        s_tgt = words[s_src] ^ self.masks[s_p] ^ self.masks[s_a]

        # doubles: (c, npairs, Ld)
        i, j = self.pairs
        Pp, Qp = orbs[:, i], orbs[:, j]
        row = pair_index(Pp, Qp, m)
        AB = t.doubles_target[row]
        a, b = AB[..., 0], AB[..., 1]
        valid = a != PAD
        a_s, b_s = np.where(valid, a, 0), np.where(valid, b, 0)
        r3 = rows[:, :, None]
        valid &= ~occ[r3, a_s] & ~occ[r3, b_s]
        p3, q3 = Pp[:, :, None], Qp[:, :, None]
        lo, hi = np.minimum(p3, a_s), np.maximum(p3, a_s)
        n1 = below[r3, hi] - below[r3, lo + 1]
        lo, hi = np.minimum(q3, b_s), np.maximum(q3, b_s)
        n2 = below[r3, hi] - below[r3, lo + 1]
        # second move sees p emptied and a filled
        n2 = n2 - ((p3 > lo) & (p3 < hi)) + ((a_s > lo) & (a_s < hi))
        w = t.doubles_weight[row]
        elem = np.where((n1 + n2) & 1, -w, w)
        valid &= np.abs(elem) > eps
        src = r3
        d_src, d_p, d_q, d_a, d_b, d_el = compact(valid, src, p3, q3, a_s, b_s, elem)
        d_tgt = words[d_src] ^ self.masks[d_p] ^ self.masks[d_q] ^ self.masks[d_a] ^ self.masks[d_b]

        return RecordBatch(
            np.concatenate([s_src, d_src]).astype(np.int64) + offset,
            np.concatenate([s_tgt, d_tgt]).reshape(-1, WORDS),
            np.concatenate([s_el, d_el]).astype(float),
        )


def generate_coupled(
    sources,
    tables: ExcitationTables,
    ints: IntegralStore,
    space: OrbitalSpace,
    eps: float = 0.0,
    chunk: int = 64,
    workers: int = 1,
    offset: int = 0,
) -> RecordBatch:
    """Coupled records of every source, sorted by ``(source_idx, target)``.

    ``sources`` is a list of :class:`Configuration` or a word array.  The
    diagonal (``target == source``) is never emitted.
    """
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    words = sources if isinstance(sources, np.ndarray) else to_words(sources)
    words = np.ascontiguousarray(words, dtype=np.uint64).reshape(-1, WORDS)
    kernel = _Kernel(tables, ints, space)
    starts = range(0, len(words), chunk)

    def work(start: int) -> RecordBatch:
        return kernel.run(words[start : start + chunk], offset + start, eps)

    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    return RecordBatch.concat(parts).canonical_order()


def local_unique(records: RecordBatch) -> tuple[np.ndarray, RecordBatch]:
    """Sorted distinct targets, plus the untouched record stream for spilling."""
    return sort_unique(records.targets), records
