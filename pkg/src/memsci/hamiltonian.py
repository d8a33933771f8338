"""Integrals, FCIDUMP I/O, Slater-Condon matrix elements and excitation tables."""

from __future__ import annotations

import io
import re
import struct
from dataclasses import dataclass, field
from functools import cached_property
from typing import TextIO

import numpy as np

from .conf import (
    Configuration,
    OrbitalSpace,
    SectorMismatch,
    apply_double,
    apply_single,
    occupied_orbitals,
)

TABLE_MAGIC = b"SCITBL1\0"
ENTRY_BYTES = 16  # int64 target id + float64 weight
PAD = -1


class FCIDumpError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True, eq=False)
class IntegralStore:
    """Spin-free real integrals over ``n_spatial`` orbitals.

    ``eri[p, q, r, s]`` is ``(pq|rs)`` in chemist notation and carries the full
    eightfold permutational symmetry.
    """

    n_spatial: int
    h: np.ndarray
    eri: np.ndarray
    e_core: float = 0.0

    def __post_init__(self):
        n = self.n_spatial
        if self.h.shape != (n, n) or self.eri.shape != (n, n, n, n):
            raise ValueError("integral shapes do not match n_spatial")
        if not (np.isfinite(self.h).all() and np.isfinite(self.eri).all() and np.isfinite(self.e_core)):
            raise ValueError("non-finite integral")

    @property
    def m(self) -> int:
        return 2 * self.n_spatial

    def is_symmetric(self, atol: float = 0.0) -> bool:
        g = self.eri
        perms = [(1, 0, 2, 3), (0, 1, 3, 2), (2, 3, 0, 1)]
        ok = np.allclose(self.h, self.h.T, atol=atol, rtol=0)
        return ok and all(np.allclose(g, g.transpose(p), atol=atol, rtol=0) for p in perms)

    def antisym(self, p, q, r, s):
        """``<pq||rs>`` over spin orbitals; works elementwise on index arrays."""
        p, q, r, s = (np.asarray(x) for x in (p, q, r, s))
        sp, sq, sr, ss = p & 1, q & 1, r & 1, s & 1
        g = self.eri
        direct = g[p >> 1, r >> 1, q >> 1, s >> 1] * ((sp == sr) & (sq == ss))
        exchange = g[p >> 1, s >> 1, q >> 1, r >> 1] * ((sp == ss) & (sq == sr))
        out = direct - exchange
        return float(out) if out.ndim == 0 else out

    @cached_property
    def h_spin(self) -> np.ndarray:
        """One-electron integrals over spin orbitals."""
        idx = np.arange(self.m)
        same = (idx[:, None] & 1) == (idx[None, :] & 1)
        return self.h[idx[:, None] >> 1, idx[None, :] >> 1] * same

    @cached_property
    def mean_field(self) -> np.ndarray:
        """``mean_field[p, a, k] = <pk||ak>``; summed over occupied ``k`` it
        turns ``h_pa`` into the single-excitation element."""
        idx = np.arange(self.m)
        p, a, k = np.meshgrid(idx, idx, idx, indexing="ij")
        return np.ascontiguousarray(self.antisym(p, k, a, k))

    @cached_property
    def pair_diagonal(self) -> np.ndarray:
        """``<pq||pq>`` over spin orbitals."""
        idx = np.arange(self.m)
        p, q = np.meshgrid(idx, idx, indexing="ij")
        return self.antisym(p, q, p, q)


# -- FCIDUMP -----------------------------------------------------------------

_HEADER_END = re.compile(r"&END|/\s*$", re.IGNORECASE)
_KEYVAL = re.compile(r"([A-Za-z_][A-Za-z0-9_]*)\s*=\s*([^=]*?)(?=,?\s*[A-Za-z_][A-Za-z0-9_]*\s*=|$)")


def _parse_header(text: str) -> dict[str, str]:
    body = re.sub(r"^\s*&FCI", "", text, flags=re.IGNORECASE)
    body = _HEADER_END.sub("", body).replace("\n", " ")
    out = {}
    for key, value in _KEYVAL.findall(body):
        out[key.upper()] = value.strip().rstrip(",")
    return out


def parse_fcidump(stream: TextIO | str) -> tuple[IntegralStore, OrbitalSpace]:
    """Read a Molpro-style FCIDUMP (spin-free, 1-based indices)."""
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    lines = stream.read().splitlines()
    if not lines or not lines[0].lstrip().upper().startswith("&FCI"):
        raise FCIDumpError("missing &FCI header", 1)

    header_lines = []
    body_start = None
    for i, line in enumerate(lines):
        header_lines.append(line)
        if _HEADER_END.search(line.strip()):
            body_start = i + 1
            break
    if body_start is None:
        raise FCIDumpError("unterminated header (no &END or /)")
    header = _parse_header("\n".join(header_lines))

    for key in ("NORB", "NELEC"):
        if key not in header:
            raise FCIDumpError(f"header lacks {key}", 1)
    try:
        norb = int(header["NORB"])
        nelec = int(header["NELEC"])
        ms2 = int(header.get("MS2", nelec % 2))
    except ValueError as exc:
        raise FCIDumpError(f"malformed header value: {exc}", 1) from None
    uhf = header.get("UHF", header.get("IUHF", "")).strip(".").upper()
    if uhf in {"TRUE", "T", "1"}:
        raise FCIDumpError("UHF integrals are not supported", 1)
    if norb <= 0 or nelec <= 0:
        raise FCIDumpError("NORB and NELEC must be positive", 1)

    h = np.zeros((norb, norb))
    eri = np.zeros((norb, norb, norb, norb))
    e_core = 0.0
    seen: dict[tuple[int, ...], float] = {}

    for lineno, line in enumerate(lines[body_start:], start=body_start + 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 5:
            raise FCIDumpError(f"expected 'value i j k l', got {line.strip()!r}", lineno)
        try:
            value = float(parts[0].replace("D", "E").replace("d", "e"))
            i, j, k, l = (int(x) for x in parts[1:])
        except ValueError:
            raise FCIDumpError(f"non-numeric token in {line.strip()!r}", lineno) from None
        if not all(0 <= x <= norb for x in (i, j, k, l)):
            raise FCIDumpError(f"index out of range 0..{norb}", lineno)

        if i == j == k == l == 0:
            canon = (0, 0, 0, 0)
        elif k == 0 and l == 0:
            if i == 0 or j == 0:
                raise FCIDumpError("orbital energies (i 0 0 0) are not supported", lineno)
            canon = (max(i, j), min(i, j), 0, 0)
        else:
            if 0 in (i, j, k, l):
                raise FCIDumpError("malformed two-electron indices", lineno)
            ij = (max(i, j), min(i, j))
            kl = (max(k, l), min(k, l))
            canon = max(ij, kl) + min(ij, kl)
        if canon in seen and seen[canon] != value:
            raise FCIDumpError(f"conflicting duplicate entry for {canon}", lineno)
        seen[canon] = value

        if canon == (0, 0, 0, 0):
            e_core = value
        elif canon[2] == 0:
            a, b = canon[0] - 1, canon[1] - 1
            h[a, b] = h[b, a] = value
        else:
            a, b, c, d = (x - 1 for x in canon)
            for p, q in ((a, b), (b, a)):
                for r, s in ((c, d), (d, c)):
                    eri[p, q, r, s] = value
                    eri[r, s, p, q] = value

    store = IntegralStore(norb, h, eri, e_core)
    return store, OrbitalSpace(2 * norb, nelec, ms2=ms2)


def write_fcidump(ints: IntegralStore, space: OrbitalSpace, tol: float = 0.0) -> str:
    """Serialize with ``repr``-exact floats so a re-parse is lossless."""
    n = ints.n_spatial
    ms2 = space.n_alpha - space.n_beta
    out = [f" &FCI NORB={n},NELEC={space.n_elec},MS2={ms2},", "  ORBSYM=" + "1," * n, "  ISYM=1,", " &END"]
    for i in range(n):
        for j in range(i + 1):
            for k in range(n):
                for l in range(k + 1):
                    if (i * (i + 1) // 2 + j) < (k * (k + 1) // 2 + l):
                        continue
                    v = float(ints.eri[i, j, k, l])
                    if abs(v) > tol:
                        out.append(f"{v!r} {i + 1} {j + 1} {k + 1} {l + 1}")
    for i in range(n):
        for j in range(i + 1):
            v = float(ints.h[i, j])
            if abs(v) > tol:
                out.append(f"{v!r} {i + 1} {j + 1} 0 0")
    out.append(f"{float(ints.e_core)!r} 0 0 0 0")
    return "\n".join(out) + "\n"


# -- Slater-Condon -----------------------------------------------------------

def diagonal_element(c: Configuration, ints: IntegralStore) -> float:
    occ = c.occupied
    hs = ints.h_spin
    pd = ints.pair_diagonal
    one = 0.0
    for p in occ:
        one += hs[p, p]
    two = 0.0
    for p in occ:
        for q in occ:
            two += pd[p, q]
    return one + 0.5 * two + ints.e_core


def single_element(c: Configuration, p: int, a: int, ints: IntegralStore) -> float:
    """Sign-free ``h_pa + sum_k <pk||ak>`` over the orbitals occupied in ``c``."""
    value = ints.h_spin[p, a]
    mf = ints.mean_field
    for k in c.occupied:
        value += mf[p, a, k]
    return float(value)


def slater_condon(ci: Configuration, cj: Configuration, ints: IntegralStore) -> float:
    """``<ci|H|cj>`` for determinants in the same particle sector."""
    if ci.n_elec != cj.n_elec:
        raise SectorMismatch(f"{ci.n_elec} vs {cj.n_elec} electrons")
    diff = ci.bits ^ cj.bits
    degree = diff.bit_count() // 2
    if degree == 0:
        return diagonal_element(ci, ints)
    if degree > 2:
        return 0.0
    holes = occupied_orbitals(ci.bits & diff)
    parts = occupied_orbitals(cj.bits & diff)
    if degree == 1:
        (p,), (a,) = holes, parts
        _, parity = apply_single(ci, p, a)
        return parity * single_element(ci, p, a, ints)
    (p, q), (a, b) = holes, parts
    _, parity = apply_double(ci, p, q, a, b)
    return parity * ints.antisym(p, q, a, b)


# -- excitation tables -------------------------------------------------------

def pair_index(p, q, m: int):
    """Lexicographic index of the orbital pair ``p < q`` among all ``m`` choose 2."""
    return p * m - p * (p + 1) // 2 + (q - p - 1)


@dataclass(frozen=True, eq=False)
class ExcitationTables:
    """Padded single/double target lists.

    ``singles_target[p]`` holds same-spin targets ``a`` of spin orbital ``p``
    (``-1`` pads) and ``singles_weight`` an upper bound on the magnitude of the
    occupancy-dependent single element.  ``doubles_target[pair_index(p, q)]``
    holds ``(a, b)`` pairs and ``doubles_weight`` the signed ``<pq||ab>``.
    """

    m: int
    singles_target: np.ndarray
    singles_weight: np.ndarray
    doubles_target: np.ndarray
    doubles_weight: np.ndarray
    max_single_size: int
    max_double_size: int
    eps_table: float = 0.0
    meta: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, ExcitationTables):
            return NotImplemented
        return (
            self.m == other.m
            and self.max_single_size == other.max_single_size
            and self.max_double_size == other.max_double_size
            and np.array_equal(self.singles_target, other.singles_target)
            and np.array_equal(self.singles_weight, other.singles_weight)
            and np.array_equal(self.doubles_target, other.doubles_target)
            and np.array_equal(self.doubles_weight, other.doubles_weight)
        )


def _pad_rows(rows_t, rows_w, width, entry_shape=()):
    n = len(rows_t)
    targets = np.full((n, width) + entry_shape, PAD, dtype=np.int64)
    weights = np.zeros((n, width))
    for i, (t, w) in enumerate(zip(rows_t, rows_w)):
        targets[i, : len(t)] = t
        weights[i, : len(w)] = w
    return targets, weights


def build_tables(ints: IntegralStore, space: OrbitalSpace, eps_table: float = 0.0) -> ExcitationTables:
    if eps_table < 0:
        raise ValueError("eps_table must be >= 0")
    m = space.m
    if ints.m != m:
        raise ValueError(f"integrals cover {ints.m} spin orbitals, space has {m}")

    g = np.abs(ints.eri)
    coulomb = np.einsum("pabb->pa", g)
    exchange = np.einsum("pbba->pa", g)
    bound = np.abs(ints.h) + 2.0 * coulomb + exchange

    idx = np.arange(m)
    s_rows_t, s_rows_w = [], []
    for p in range(m):
        cand = idx[(idx % 2 == p % 2) & (idx != p)]
        w = bound[p >> 1, cand >> 1]
        keep = w > eps_table
        s_rows_t.append(cand[keep])
        s_rows_w.append(w[keep])

    a_all, b_all = np.triu_indices(m, 1)
    d_rows_t, d_rows_w = [], []
    for p in range(m):
        for q in range(p + 1, m):
            spin_ok = ((a_all & 1) + (b_all & 1)) == ((p & 1) + (q & 1))
            disjoint = (a_all != p) & (a_all != q) & (b_all != p) & (b_all != q)
            sel = spin_ok & disjoint
            a, b = a_all[sel], b_all[sel]
            w = ints.antisym(np.full_like(a, p), np.full_like(a, q), a, b)
            keep = np.abs(w) > eps_table
            d_rows_t.append(np.stack([a[keep], b[keep]], axis=1))
            d_rows_w.append(w[keep])

    max_single = max((len(t) for t in s_rows_t), default=0)
    max_double = max((len(t) for t in d_rows_t), default=0)
    s_t, s_w = _pad_rows(s_rows_t, s_rows_w, max(max_single, 1))
    d_t, d_w = _pad_rows(d_rows_t, d_rows_w, max(max_double, 1), (2,))
    return ExcitationTables(m, s_t, s_w, d_t, d_w, max_single, max_double, eps_table)


def table_footprint(tables: ExcitationTables) -> int:
    """Exact byte size of the blob written by :func:`dump_tables`.

    Rows are stored at their reported widths; the in-memory minimum width of
    one pad slot is not serialized.
    """
    header = len(TABLE_MAGIC) + 3 * 8
    m = tables.m
    slots = m * tables.max_single_size + m * (m - 1) // 2 * tables.max_double_size
    return header + ENTRY_BYTES * slots


def dump_tables(tables: ExcitationTables) -> bytes:
    m = tables.m
    buf = io.BytesIO()
    buf.write(TABLE_MAGIC)
    ws, wd = tables.max_single_size, tables.max_double_size
    buf.write(struct.pack("<QQQ", m, ws, wd))

    single = np.empty((m, ws), dtype=[("t", "<i8"), ("w", "<f8")])
    single["t"] = tables.singles_target[:, :ws]
    single["w"] = tables.singles_weight[:, :ws]
    buf.write(single.tobytes())

    a, b = tables.doubles_target[:, :wd, 0], tables.doubles_target[:, :wd, 1]
    double = np.empty(a.shape, dtype=[("t", "<i8"), ("w", "<f8")])
    double["t"] = np.where(a == PAD, PAD, a * m + b)
    double["w"] = tables.doubles_weight[:, :wd]
    buf.write(double.tobytes())
    return buf.getvalue()


def load_tables(blob: bytes) -> ExcitationTables:
    if blob[:8] != TABLE_MAGIC:
        raise ValueError("not an excitation-table blob")
    m, ws, wd = struct.unpack_from("<QQQ", blob, 8)
    off = 32
    dt = np.dtype([("t", "<i8"), ("w", "<f8")])
    single = np.frombuffer(blob, dtype=dt, count=m * ws, offset=off).reshape(m, ws)
    off += single.nbytes
    npairs = m * (m - 1) // 2
    double = np.frombuffer(blob, dtype=dt, count=npairs * wd, offset=off).reshape(npairs, wd)
    if off + double.nbytes != len(blob):
        raise ValueError("trailing or missing table bytes")
    t = double["t"].astype(np.int64)
    d_t = np.where(t[..., None] == PAD, PAD, np.stack([t // m, t % m], axis=-1))
    s_t, s_w = _widen(single["t"].astype(np.int64), single["w"].astype(float))
    d_t, d_w = _widen(d_t, double["w"].astype(float))
    return ExcitationTables(m, s_t, s_w, d_t, d_w, int(ws), int(wd))


def _widen(targets: np.ndarray, weights: np.ndarray):
    """Give zero-width rows their single in-memory pad slot."""
    if targets.shape[1]:
        return targets, weights
    shape = (targets.shape[0], 1) + targets.shape[2:]
    return np.full(shape, PAD, dtype=np.int64), np.zeros((targets.shape[0], 1))
