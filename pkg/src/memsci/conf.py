"""Slater-determinant configurations as fixed-width occupation bitstrings.

A configuration marks which of ``m`` spin orbitals are occupied.  Orbital
``t`` lives in 64-bit word ``t // 64`` at bit ``t % 64``; the textual form
puts orbital 0 in the leftmost character.  Configurations are ordered as one
big unsigned integer, most significant word first, and that order is shared by
every sort, splitter and binary search in the package.

Two representations coexist:

* :class:`Configuration` -- an immutable scalar wrapper around a Python int,
  convenient for excitation algebra and tests.
* word arrays -- ``(N, WORDS)`` ``uint64`` arrays used by every bulk path
  (generation, de-duplication, spill segments).  :func:`order_keys` maps them
  to fixed-width byte strings whose lexicographic order is the global order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

WORDS = 2
MAX_ORBITALS = 64 * WORDS

ALPHA_BETA_INTERLEAVED = "interleaved"


class ConfigurationError(ValueError):
    """Malformed configuration or orbital index."""


class InvalidExcitation(ValueError):
    pass


class SectorMismatch(ValueError):
    pass


@dataclass(frozen=True)
class OrbitalSpace:
    """Spin-orbital count ``m`` and electron count.

    Spin orbital ``2k`` is the alpha partner of spatial orbital ``k`` and
    ``2k + 1`` the beta partner.  ``ms2`` is twice the spin projection of the
    reference determinant; ``None`` picks the lowest allowed value.
    """

    m: int
    n_elec: int
    spin: str = ALPHA_BETA_INTERLEAVED
    ms2: int | None = None

    def __post_init__(self):
        if not 0 < self.m <= MAX_ORBITALS:
            raise ConfigurationError(f"m={self.m} outside (0, {MAX_ORBITALS}]")
        if not 0 < self.n_elec <= self.m:
            raise ConfigurationError(f"n_elec={self.n_elec} outside (0, m={self.m}]")
        if self.spin != ALPHA_BETA_INTERLEAVED:
            raise ConfigurationError(f"unsupported spin convention {self.spin!r}")
        if self.ms2 is not None and (self.ms2 - self.n_elec) % 2:
            raise ConfigurationError("ms2 parity must match n_elec")

    @property
    def n_alpha(self) -> int:
        ms2 = self.n_elec % 2 if self.ms2 is None else self.ms2
        return (self.n_elec + ms2) // 2

    @property
    def n_beta(self) -> int:
        return self.n_elec - self.n_alpha


@dataclass(frozen=True, order=True)
class Configuration:
    """Occupation bitstring; ``bits`` holds orbital ``t`` at bit ``t``."""

    bits: int
    m: int

    def __post_init__(self):
        if self.bits < 0 or self.bits >> self.m:
            raise ConfigurationError("bits set at positions >= m")

    @property
    def n_elec(self) -> int:
        return self.bits.bit_count()

    @property
    def occupied(self) -> list[int]:
        return occupied_orbitals(self.bits)

    def is_occupied(self, orbital: int) -> bool:
        return bool(self.bits >> orbital & 1)

    @property
    def words(self) -> tuple[int, ...]:
        mask = (1 << 64) - 1
        return tuple((self.bits >> (64 * w)) & mask for w in range(WORDS))

    def render(self) -> str:
        return "".join("1" if self.bits >> t & 1 else "0" for t in range(self.m))

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "Configuration":
        text = text.strip()
        if not text or set(text) - {"0", "1"}:
            raise ConfigurationError(f"not a 0/1 string: {text!r}")
        if len(text) > MAX_ORBITALS:
            raise ConfigurationError(f"length {len(text)} exceeds {MAX_ORBITALS}")
        bits = 0
        for t, ch in enumerate(text):
            if ch == "1":
                bits |= 1 << t
        return cls(bits, len(text))

    @classmethod
    def from_words(cls, words: Sequence[int], m: int) -> "Configuration":
        bits = 0
        for w, value in enumerate(words):
            bits |= int(value) << (64 * w)
        return cls(bits, m)


def occupied_orbitals(bits: int) -> list[int]:
    out = []
    while bits:
        low = bits & -bits
        out.append(low.bit_length() - 1)
        bits ^= low
    return out


def make_config(occupied: Iterable[int], space: OrbitalSpace) -> Configuration:
    bits = 0
    for t in occupied:
        t = int(t)
        if not 0 <= t < space.m:
            raise ConfigurationError(f"orbital {t} outside [0, {space.m})")
        if bits >> t & 1:
            raise ConfigurationError(f"duplicate orbital {t}")
        bits |= 1 << t
    return Configuration(bits, space.m)


def reference_config(space: OrbitalSpace) -> Configuration:
    """Hartree-Fock determinant: lowest alpha and beta spin orbitals filled."""
    occ = [2 * k for k in range(space.n_alpha)] + [2 * k + 1 for k in range(space.n_beta)]
    return make_config(occ, space)


def hilbert_dimension(space: OrbitalSpace) -> int:
    return math.comb(space.m, space.n_elec)


def _between(bits: int, lo: int, hi: int) -> int:
    """Occupied orbitals strictly between ``lo`` and ``hi`` (lo < hi)."""
    span = ((1 << hi) - 1) & ~((1 << (lo + 1)) - 1)
    return (bits & span).bit_count()


def apply_single(c: Configuration, p: int, a: int) -> tuple[Configuration, int]:
    """Move the electron in ``p`` to ``a``; returns the new configuration and
    the sign of ``a_a^dagger a_p`` acting on ``c``."""
    if p == a or not (0 <= p < c.m and 0 <= a < c.m):
        raise InvalidExcitation(f"invalid excitation {p}->{a}")
    if not c.bits >> p & 1:
        raise InvalidExcitation(f"invalid excitation: orbital {p} unoccupied")
    if c.bits >> a & 1:
        raise InvalidExcitation(f"invalid excitation: orbital {a} occupied")
    lo, hi = (p, a) if p < a else (a, p)
    parity = -1 if _between(c.bits, lo, hi) & 1 else 1
    return Configuration(c.bits ^ (1 << p) ^ (1 << a), c.m), parity


def apply_double(c: Configuration, p: int, q: int, a: int, b: int) -> tuple[Configuration, int]:
    """``pq -> ab`` as ``p -> a`` followed by ``q -> b``; the parity is the
    product of the two single-move signs."""
    if not (p < q and a < b) or {p, q} & {a, b}:
        raise InvalidExcitation(f"invalid excitation ({p},{q})->({a},{b})")
    mid, s1 = apply_single(c, p, a)
    out, s2 = apply_single(mid, q, b)
    return out, s1 * s2


def diff_degree(c1: Configuration, c2: Configuration) -> int:
    if c1.n_elec != c2.n_elec:
        raise SectorMismatch(f"{c1.n_elec} vs {c2.n_elec} electrons")
    return (c1.bits ^ c2.bits).bit_count() // 2


# -- bulk word arrays --------------------------------------------------------

def to_words(configs: Iterable[Configuration]) -> np.ndarray:
    rows = [c.words for c in configs]
    if not rows:
        return np.zeros((0, WORDS), dtype=np.uint64)
    return np.array(rows, dtype=np.uint64)


def from_words(words: np.ndarray, m: int) -> list[Configuration]:
    return [Configuration.from_words(row, m) for row in np.asarray(words).tolist()]


def bits_to_words(bits: Sequence[int]) -> np.ndarray:
    mask = (1 << 64) - 1
    out = np.zeros((len(bits), WORDS), dtype=np.uint64)
    for w in range(WORDS):
        out[:, w] = [(b >> (64 * w)) & mask for b in bits]
    return out


def order_keys(words: np.ndarray) -> np.ndarray:
    """Byte-string keys (``S{8*WORDS}``) sorting in the global configuration order."""
    words = np.asarray(words, dtype=np.uint64).reshape(-1, WORDS)
    be = np.ascontiguousarray(words[:, ::-1]).astype(">u8")
    return be.view(f"S{8 * WORDS}").ravel()


def keys_to_words(keys: np.ndarray) -> np.ndarray:
    raw = np.ascontiguousarray(keys, dtype=f"S{8 * WORDS}")
    be = np.frombuffer(raw.tobytes(), dtype=">u8").reshape(-1, WORDS)
    return np.ascontiguousarray(be[:, ::-1]).astype(np.uint64)


def argsort_words(words: np.ndarray) -> np.ndarray:
    return np.argsort(order_keys(words), kind="stable")


def sort_unique(words: np.ndarray) -> np.ndarray:
    keys = np.unique(order_keys(words))
    return keys_to_words(keys)


def searchsorted(sorted_words: np.ndarray, query: np.ndarray, side: str = "left") -> np.ndarray:
    return np.searchsorted(order_keys(sorted_words), order_keys(query), side=side)


def occupancy(words: np.ndarray, m: int) -> np.ndarray:
    """``(N, m)`` boolean occupation matrix."""
    words = np.ascontiguousarray(words, dtype="<u8").reshape(-1, WORDS)
    bits = np.unpackbits(words.view(np.uint8), axis=1, bitorder="little")
    return bits[:, :m].astype(bool)


def pack_occupancy(occ: np.ndarray) -> np.ndarray:
    occ = np.asarray(occ, dtype=bool)
    n, m = occ.shape
    padded = np.zeros((n, 64 * WORDS), dtype=np.uint8)
    padded[:, :m] = occ
    packed = np.packbits(padded, axis=1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64)


def orbital_masks(m: int) -> np.ndarray:
    """``(m + 1, WORDS)`` single-bit masks; the extra row is all-zero."""
    masks = np.zeros((m + 1, WORDS), dtype=np.uint64)
    for t in range(m):
        masks[t, t // 64] = np.uint64(1) << np.uint64(t % 64)
    return masks


def enumerate_sector(space: OrbitalSpace, n_alpha: int | None = None) -> np.ndarray:
    """Sorted word array of every configuration with the given electron count
    (and alpha count, if given)."""
    from itertools import combinations

    bits = []
    for occ in combinations(range(space.m), space.n_elec):
        if n_alpha is not None and sum(1 for t in occ if t % 2 == 0) != n_alpha:
            continue
        value = 0
        for t in occ:
            value |= 1 << t
        bits.append(value)
    bits.sort()
    return bits_to_words(bits)
