from __future__ import annotations

from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memsci.conf import Configuration, OrbitalSpace, diff_degree, enumerate_sector, from_words
from memsci.fixtures import random_integrals
from memsci.genkernel import (
    RecordBatch,
    compact,
    decompose_virtual_id,
    generate_coupled,
    local_unique,
    virtual_space,
    virtual_space_for,
)
from memsci.hamiltonian import IntegralStore, build_tables, slater_condon
from memsci.oracle import naive_coupled, naive_dedup


def sector_sample(space, count, rng):
    sector = enumerate_sector(space, space.n_alpha)
    pick = rng.choice(len(sector), size=min(count, len(sector)), replace=False)
    return sector[np.sort(pick)]


def as_dicts(batch: RecordBatch, m: int):
    out: dict[int, dict] = {}
    for rec in batch.records(m):
        out.setdefault(rec.source_idx, {})[rec.target] = rec.element
    return out


def test_virtual_space_counts():
    vs = virtual_space(14, 27, 354)
    assert (vs.n_single, vs.n_double) == (378, 32_214)
    assert virtual_space(1, 5, 9).n_double == 0


def test_decompose_virtual_id():
    vs = virtual_space(4, 3, 5)
    assert decompose_virtual_id(0, vs) == ("single", 0, 0)
    assert decompose_virtual_id(vs.n_single, vs) == ("double", 0, 0)
    assert decompose_virtual_id(vs.n_single + 5, vs) == ("double", 1, 0)
    assert decompose_virtual_id(7, vs) == ("single", 2, 1)
    with pytest.raises(IndexError):
        decompose_virtual_id(vs.total, vs)


def test_virtual_space_for_mismatch(small_system):
    ints, space, tables = small_system
    with pytest.raises(ValueError):
        virtual_space_for(OrbitalSpace(12, 4), tables)


def test_single_electron_example():
    h = np.full((2, 2), 0.3)
    ints = IntegralStore(2, h, np.zeros((2, 2, 2, 2)), 0.0)
    space = OrbitalSpace(4, 1)
    tables = build_tables(ints, space)
    src = Configuration.parse("1000")
    out = generate_coupled([src], tables, ints, space)
    assert len(out) == 1
    rec = out.records(4)[0]
    assert rec.target.render() == "0010" and rec.element == pytest.approx(0.3)


def test_eps_infinite_is_empty(small_system, rng):
    ints, space, tables = small_system
    assert len(generate_coupled(sector_sample(space, 5, rng), tables, ints, space, eps=np.inf)) == 0


def test_negative_eps_rejected(small_system, rng):
    ints, space, tables = small_system
    with pytest.raises(ValueError):
        generate_coupled(sector_sample(space, 2, rng), tables, ints, space, eps=-1.0)


@pytest.mark.parametrize("eps", [0.0, 1e-3])
def test_matches_naive_oracle(odd_system, rng, eps):
    ints, space, tables = odd_system
    sources = sector_sample(space, 120, rng)
    got = as_dicts(generate_coupled(sources, tables, ints, space, eps=eps), space.m)
    for i, src in enumerate(from_words(sources, space.m)):
        want = naive_coupled(src, ints, eps)
        assert set(got.get(i, {})) == set(want)
        for tgt, el in want.items():
            assert got[i][tgt] == pytest.approx(el, abs=1e-12)


def test_records_are_slater_condon(small_system, rng):
    ints, space, tables = small_system
    sources = sector_sample(space, 30, rng)
    out = generate_coupled(sources, tables, ints, space)
    src_confs = from_words(sources, space.m)
    for rec in out.records(space.m):
        src = src_confs[rec.source_idx]
        assert rec.target != src
        assert diff_degree(src, rec.target) in (1, 2)
        assert rec.element == pytest.approx(slater_condon(src, rec.target, ints), abs=1e-12)


def test_closed_form_count_without_screening():
    # with every integral nonzero each spin-allowed excitation is emitted
    ints, space = random_integrals(9, 10, 4)
    tables = build_tables(ints, space)
    na, nb, k = space.n_alpha, space.n_beta, space.m // 2
    singles = na * (k - na) + nb * (k - nb)
    doubles = comb(na, 2) * comb(k - na, 2) + comb(nb, 2) * comb(k - nb, 2) + na * (k - na) * nb * (k - nb)
    sources = enumerate_sector(space, space.n_alpha)
    out = generate_coupled(sources, tables, ints, space)
    counts = np.bincount(out.source_idx, minlength=len(sources))
    assert (counts == singles + doubles).all()
    assert (counts <= virtual_space_for(space, tables).total).all()


@pytest.mark.parametrize("chunk", [1, 17, 4096])
@pytest.mark.parametrize("workers", [1, 4])
def test_byte_identical_across_chunks_and_workers(odd_system, rng, chunk, workers):
    ints, space, tables = odd_system
    sources = sector_sample(space, 60, np.random.default_rng(3))
    ref = generate_coupled(sources, tables, ints, space, chunk=64, workers=1).tobytes()
    assert generate_coupled(sources, tables, ints, space, chunk=chunk, workers=workers).tobytes() == ref


def test_offset_shifts_source_index(small_system, rng):
    ints, space, tables = small_system
    sources = sector_sample(space, 4, rng)
    a = generate_coupled(sources, tables, ints, space)
    b = generate_coupled(sources, tables, ints, space, offset=10)
    assert np.array_equal(b.source_idx, a.source_idx + 10)


def test_canonical_order(small_system, rng):
    ints, space, tables = small_system
    out = generate_coupled(sector_sample(space, 20, rng), tables, ints, space)
    keys = [(r.source_idx, r.target.bits) for r in out.records(space.m)]
    assert keys == sorted(keys)


def test_local_unique(small_system, rng):
    ints, space, tables = small_system
    out = generate_coupled(sector_sample(space, 25, rng), tables, ints, space)
    uniq, spill = local_unique(out)
    assert spill is out
    assert np.array_equal(uniq, naive_dedup([out.targets]))
    e_u, e_s = local_unique(RecordBatch.empty())
    assert len(e_u) == 0 and len(e_s) == 0


def test_local_unique_duplicate_targets():
    t = np.array([[5, 0], [5, 0]], dtype=np.uint64)
    batch = RecordBatch(np.array([0, 1]), t, np.array([0.1, 0.2]))
    uniq, spill = local_unique(batch)
    assert len(uniq) == 1 and len(spill) == 2


def test_sector_check(small_system):
    ints, space, tables = small_system
    with pytest.raises(ValueError):
        generate_coupled([Configuration.parse("1110000000")], tables, ints, space)


@given(st.lists(st.booleans(), max_size=64))
def test_compact_is_gap_free_and_stable(mask):
    mask = np.array(mask, dtype=bool)
    values = np.arange(len(mask)) * 3
    (out,) = compact(mask, values)
    assert out.tolist() == values[mask].tolist()
