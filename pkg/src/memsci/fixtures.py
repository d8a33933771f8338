"""Deterministic random-integral FCIDUMP fixtures.

The integrals mimic a small molecule in a canonical orbital basis: ordered
orbital energies on the diagonal of ``h``, positive Coulomb integrals
``(pp|qq)``, and weaker random couplings elsewhere.  ``density`` is the
fraction of off-diagonal couplings kept; ``density=0`` gives a diagonal ``h``
and Coulomb-only two-electron integrals.
"""

from __future__ import annotations

import numpy as np

from .conf import OrbitalSpace
from .hamiltonian import IntegralStore, write_fcidump


def random_integrals(
    seed: int,
    m: int,
    n: int,
    density: float = 1.0,
    strength: float = 0.05,
    gap: float = 0.6,
) -> tuple[IntegralStore, OrbitalSpace]:
    if m % 2 or m <= 0:
        raise ValueError("m (spin orbitals) must be even and positive")
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    k = m // 2

    h = np.diag(-2.0 + gap * np.arange(k) + 0.1 * rng.random(k))
    off = strength * rng.standard_normal((k, k)) * (rng.random((k, k)) < density)
    off = np.triu(off, 1)
    h = h + off + off.T

    eri = np.zeros((k, k, k, k))
    for i in range(k):
        for j in range(i + 1):
            for a in range(k):
                for b in range(a + 1):
                    if i * (i + 1) // 2 + j < a * (a + 1) // 2 + b:
                        continue
                    if i == j and a == b:
                        v = 0.4 + 0.2 * rng.random()
                    elif (i, j) == (a, b) or (i == a and j == b):
                        v = 0.1 + 0.1 * rng.random() if density > 0 else 0.0
                    else:
                        draw = rng.standard_normal()
                        v = strength * draw if rng.random() < density else 0.0
                    for p, q in ((i, j), (j, i)):
                        for r, s in ((a, b), (b, a)):
                            eri[p, q, r, s] = v
                            eri[r, s, p, q] = v
    e_core = float(1.0 + rng.random())
    return IntegralStore(k, h, eri, e_core), OrbitalSpace(m, n)


def gen_fixture(
    seed: int, m: int, n: int, density: float = 1.0, strength: float = 0.05, gap: float = 0.6
) -> str:
    """FCIDUMP text for :func:`random_integrals`; byte-identical per arguments."""
    ints, space = random_integrals(seed, m, n, density, strength, gap)
    return write_fcidump(ints, space)
