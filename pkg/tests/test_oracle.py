from __future__ import annotations

import json
import math
from itertools import combinations
from pathlib import Path

import numpy as np
import pytest

from memsci.conf import Configuration, OrbitalSpace, bits_to_words, diff_degree, enumerate_sector, from_words
from memsci.fixtures import random_integrals
from memsci.hamiltonian import IntegralStore, build_tables, parse_fcidump, slater_condon
from memsci.oracle import (
    FCI_MAX_DIM,
    OracleGuard,
    fci_energy,
    fci_space,
    hamiltonian_column,
    naive_dedup,
    operator_element,
)
from memsci.solver import SelectedSpace, SolveConfig, sci_iterate, subspace_eigensolve

DATA = Path(__file__).parent / "data"


def test_two_orbital_analytic():
    a, b, c = -1.0, 0.5, 0.3
    ints = IntegralStore(2, np.array([[a, c], [c, b]]), np.zeros((2, 2, 2, 2)), 0.0)
    e, _, dets = fci_energy(ints, OrbitalSpace(4, 1))
    assert len(dets) == 4
    assert e == pytest.approx((a + b) / 2 - math.sqrt(((a - b) / 2) ** 2 + c * c), abs=1e-14)


def test_golden_m8():
    golden = json.loads((DATA / "golden_m8.json").read_text())
    ints, space = parse_fcidump((DATA / golden["fcidump"]).read_text())
    e, vec, dets = fci_energy(ints, space)
    assert len(dets) == golden["dimension"]
    assert e == pytest.approx(golden["fci_energy"], abs=1e-10)
    assert abs(vec @ vec - 1) < 1e-12


def test_fci_space_order():
    dets = fci_space(OrbitalSpace(5, 2))
    occs = [c.occupied for c in dets]
    assert occs == [list(x) for x in combinations(range(5), 2)]


def test_guard():
    ints, _ = random_integrals(0, 40, 10, density=0.0)
    with pytest.raises(OracleGuard):
        fci_energy(ints, OrbitalSpace(40, 10))
    assert FCI_MAX_DIM == 100_000


def test_fci_bounds_sci():
    ints, space = random_integrals(3, 10, 4)
    e_fci = fci_energy(ints, space)[0]
    res = sci_iterate(ints, space, SolveConfig(topk=3, max_iters=6, tol=0.0))
    assert all(e >= e_fci - 1e-10 for e in res.energies)


def test_restricted_fci_vector_is_not_below_subspace_minimum(rng):
    ints, space = random_integrals(4, 10, 4)
    tables = build_tables(ints, space)
    e_fci, vec, dets = fci_energy(ints, space)
    index = {c.bits: i for i, c in enumerate(dets)}
    sector = enumerate_sector(space, space.n_alpha)
    for size in (5, 20, 60):
        pick = np.sort(rng.choice(len(sector), size, replace=False))
        S = SelectedSpace(sector[pick], space.m)
        e_sub, _ = subspace_eigensolve(S, ints, tables, space)
        confs = from_words(S.words, space.m)
        v = np.array([vec[index[c.bits]] for c in confs])
        if v @ v < 1e-20:
            continue
        H = np.array([[slater_condon(a, b, ints) for b in confs] for a in confs])
        rq = v @ H @ v / (v @ v)
        assert rq >= e_sub - 1e-10


def test_operator_element_symmetric_and_local():
    ints, space = random_integrals(5, 8, 3)
    confs = fci_space(space)
    cols = {c.bits: hamiltonian_column(c, ints) for c in confs}
    for a in confs[::3]:
        for b in confs[::2]:
            x, y = operator_element(a, b, ints, cols[b.bits]), operator_element(b, a, ints, cols[a.bits])
            assert x == pytest.approx(y, abs=1e-12)
            if diff_degree(a, b) > 2:
                assert x == 0.0


def test_operator_guard():
    ints, _ = random_integrals(0, 14, 2, density=0.0)
    with pytest.raises(OracleGuard):
        hamiltonian_column(Configuration(3, 14), ints)


def test_operator_vs_slater_condon_three_pairs_per_sector(rng):
    ints, space = random_integrals(6, 10, 4)
    for na in range(0, 5):
        sector = from_words(enumerate_sector(space, na), space.m)
        for _ in range(3):
            a, b = (sector[i] for i in rng.integers(0, len(sector), 2))
            assert operator_element(a, b, ints) == pytest.approx(slater_condon(a, b, ints), abs=1e-12)


def test_naive_dedup_examples():
    a, b = bits_to_words([1, 2])
    assert naive_dedup([np.stack([a, b]), np.stack([b])]).tolist() == [a.tolist(), b.tolist()]
    assert naive_dedup([]).shape == (0, 2)
    data = np.random.default_rng(0).integers(0, 9, size=(40, 2), dtype=np.uint64)
    once = naive_dedup([data])
    assert np.array_equal(naive_dedup([once]), once)
