"""Brute-force references used to check the production paths.

Only :mod:`memsci.conf` is shared with the production code, plus
:func:`slater_condon` where an element is needed for enumeration.  The
operator oracle applies creation/annihilation operators to occupation
bitstrings directly and never uses a Slater-Condon shortcut.
"""

from __future__ import annotations

from itertools import combinations

import numpy as np
import scipy.sparse as sp

from .conf import Configuration, OrbitalSpace, bits_to_words, hilbert_dimension, occupied_orbitals, order_keys
from .hamiltonian import IntegralStore, slater_condon

FCI_MAX_DIM = 100_000
OPERATOR_MAX_M = 12


class OracleGuard(ValueError):
    pass


def fci_space(space: OrbitalSpace) -> list[Configuration]:
    """All ``C(m, n)`` configurations in lexicographic order of occupied lists."""
    out = []
    for occ in combinations(range(space.m), space.n_elec):
        bits = 0
        for t in occ:
            bits |= 1 << t
        out.append(Configuration(bits, space.m))
    return out


def _single_double_targets(c: Configuration):
    occ = occupied_orbitals(c.bits)
    virt = [t for t in range(c.m) if not c.bits >> t & 1]
    for p in occ:
        for a in virt:
            yield c.bits ^ (1 << p) ^ (1 << a)
    for p, q in combinations(occ, 2):
        for a, b in combinations(virt, 2):
            yield c.bits ^ (1 << p) ^ (1 << q) ^ (1 << a) ^ (1 << b)


def fci_hamiltonian(ints: IntegralStore, space: OrbitalSpace):
    d = hilbert_dimension(space)
    if d > FCI_MAX_DIM:
        raise OracleGuard(f"C(m, n) = {d} exceeds {FCI_MAX_DIM}")
    dets = fci_space(space)
    index = {c.bits: i for i, c in enumerate(dets)}
    rows, cols, vals = [], [], []
    for i, c in enumerate(dets):
        rows.append(i)
        cols.append(i)
        vals.append(slater_condon(c, c, ints))
        for bits in _single_double_targets(c):
            j = index[bits]
            v = slater_condon(c, dets[j], ints)
            if v != 0.0:
                rows.append(i)
                cols.append(j)
                vals.append(v)
    return dets, sp.csr_matrix((vals, (rows, cols)), shape=(d, d))


def fci_energy(ints: IntegralStore, space: OrbitalSpace) -> tuple[float, np.ndarray, list[Configuration]]:
    """Lowest eigenpair over the whole ``C(m, n)`` space (all spin sectors)."""
    dets, H = fci_hamiltonian(ints, space)
    if len(dets) <= 3000:
        w, v = np.linalg.eigh(H.toarray())
        e, vec = w[0], v[:, 0]
    else:
        from scipy.sparse.linalg import eigsh

        w, v = eigsh(H, k=1, which="SA", tol=1e-13)
        e, vec = w[0], v[:, 0]
    return float(e), vec, dets


def naive_coupled(c: Configuration, ints: IntegralStore, eps: float = 0.0) -> dict[Configuration, float]:
    out = {}
    for bits in _single_double_targets(c):
        target = Configuration(bits, c.m)
        v = slater_condon(c, target, ints)
        if abs(v) > eps:
            out[target] = v
    return out


def naive_dedup(lists) -> np.ndarray:
    """Concatenate word arrays, sort, unique."""
    arrays = [np.asarray(x, dtype=np.uint64).reshape(-1, 2) for x in lists]
    if not arrays:
        return np.zeros((0, 2), dtype=np.uint64)
    allw = np.concatenate(arrays)
    seen = {}
    for row, key in zip(allw.tolist(), order_keys(allw).tolist()):
        seen[key] = row
    return np.array([seen[k] for k in sorted(seen)], dtype=np.uint64).reshape(-1, 2)


def naive_sort_unique_bits(bits_lists) -> list[int]:
    return sorted({b for lst in bits_lists for b in lst})


# -- second-quantized operators ---------------------------------------------

def annihilate(bits: int, t: int):
    if not bits >> t & 1:
        return None
    sign = -1 if (bits & ((1 << t) - 1)).bit_count() & 1 else 1
    return sign, bits ^ (1 << t)


def create(bits: int, t: int):
    if bits >> t & 1:
        return None
    sign = -1 if (bits & ((1 << t) - 1)).bit_count() & 1 else 1
    return sign, bits | (1 << t)


def _apply(ops, bits: int):
    """Apply ``ops`` right-to-left; each op is ``('c'|'a', orbital)``."""
    sign = 1
    for kind, t in reversed(ops):
        res = (create if kind == "c" else annihilate)(bits, t)
        if res is None:
            return None
        s, bits = res
        sign *= s
    return sign, bits


def _spin_h(ints: IntegralStore, p: int, q: int) -> float:
    return ints.h[p >> 1, q >> 1] if (p & 1) == (q & 1) else 0.0


def _spin_phys(ints: IntegralStore, p: int, q: int, r: int, s: int) -> float:
    """``<pq|rs> = (pr|qs)`` with spin integration."""
    if (p & 1) != (r & 1) or (q & 1) != (s & 1):
        return 0.0
    return ints.eri[p >> 1, r >> 1, q >> 1, s >> 1]


def hamiltonian_column(cj: Configuration, ints: IntegralStore) -> dict[int, float]:
    """``H|cj>`` as ``{bits: amplitude}`` by explicit operator application of
    ``sum h_pq a+_p a_q + 1/2 sum <pq|rs> a+_p a+_q a_s a_r + e_core``."""
    m = cj.m
    if m > OPERATOR_MAX_M:
        raise OracleGuard(f"operator oracle limited to m <= {OPERATOR_MAX_M}")
    out: dict[int, float] = {cj.bits: float(ints.e_core)}

    def add(bits, value):
        out[bits] = out.get(bits, 0.0) + value

    occ = occupied_orbitals(cj.bits)
    for q in occ:
        for p in range(m):
            h = _spin_h(ints, p, q)
            if h == 0.0:
                continue
            res = _apply([("c", p), ("a", q)], cj.bits)
            if res is not None:
                add(res[1], res[0] * h)
    for r in occ:
        for s in occ:
            if r == s:
                continue
            for p in range(m):
                for q in range(m):
                    g = _spin_phys(ints, p, q, r, s)
                    if g == 0.0:
                        continue
                    res = _apply([("c", p), ("c", q), ("a", s), ("a", r)], cj.bits)
                    if res is not None:
                        add(res[1], 0.5 * res[0] * g)
    return out


def operator_element(ci: Configuration, cj: Configuration, ints: IntegralStore, column=None) -> float:
    if column is None:
        column = hamiltonian_column(cj, ints)
    return float(column.get(ci.bits, 0.0))


def topk_reference(amplitudes: np.ndarray, keys, k: int) -> list:
    """Full sort: larger ``|psi|`` first, then smaller key."""
    order = sorted(range(len(amplitudes)), key=lambda i: (-abs(amplitudes[i]), keys[i]))
    return [keys[i] for i in order[:k]]


def words_of(bits) -> np.ndarray:
    return bits_to_words(list(bits))
