"""Address-space semantics: translation, reverse mapping, write pipeline."""

from __future__ import annotations

import numpy as np
import pytest

from oohsim.memory import (
    LOST,
    AlreadyMapped,
    Ept,
    GuestPageTable,
    PageFlags,
    PageStore,
    UnknownMapping,
)


def make_space(n_pages: int) -> tuple[GuestPageTable, Ept]:
    pt = GuestPageTable(pid=1)
    ept = Ept()
    for i in range(n_pages):
        pt.map_page(i, 100 + i)
        ept.map_gpa(100 + i, 5000 + i)
    return pt, ept


def test_translate_direct_lookup():
    pt, _ = make_space(1)
    pt.map_page(7, 100)  # alias of page 0's GPA
    gpa, flags = pt.translate_gva(7)
    assert gpa == 100
    assert flags.present


def test_translate_unmapped_returns_none():
    pt, _ = make_space(1)
    assert pt.translate_gva(9) is None


def test_translate_aliasing_permitted():
    pt, _ = make_space(0)
    pt.map_page(3, 50)
    pt.map_page(4, 50)
    assert pt.translate_gva(3)[0] == 50
    assert pt.translate_gva(4)[0] == 50


def test_reverse_map_single_mapping():
    pt, _ = make_space(0)
    pt.map_page(7, 100)
    assert pt.reverse_map(100) == 7


def test_reverse_map_lost_when_unmapped():
    pt, _ = make_space(0)
    pt.map_page(3, 200)
    pt.unmap(3)
    assert pt.reverse_map(200) is LOST


def test_reverse_map_alias_tiebreak_lowest():
    pt, _ = make_space(0)
    pt.map_page(12, 50)
    pt.map_page(3, 50)
    assert pt.reverse_map(50) == 3


def test_reverse_map_after_remap_returns_new_gva():
    pt, _ = make_space(0)
    pt.map_page(3, 50)
    pt.remap(3, 12)
    assert pt.reverse_map(50) == 12
    assert pt.translate_gva(3) is None


def test_remap_and_unmap_errors():
    pt, _ = make_space(0)
    pt.map_page(1, 10)
    with pytest.raises(UnknownMapping):
        pt.unmap(99)
    with pytest.raises(UnknownMapping):
        pt.remap(99, 100)
    pt.map_page(2, 20)
    with pytest.raises(AlreadyMapped):
        pt.remap(1, 2)
    with pytest.raises(AlreadyMapped):
        pt.map_page(1, 30)


def test_write_sets_dirty_and_reports_ept_transition():
    pt, ept = make_space(1)
    out = pt.write_page(0, ept)
    assert out.completed and out.gpa == 100
    assert out.ept_dirty_set  # first write transitions the EPT dirty bit
    assert pt.entries[0].flags.dirty
    assert ept.is_dirty(100)
    again = pt.write_page(0, ept)
    assert again.completed and not again.ept_dirty_set  # no second transition


def test_ept_dirty_transition_rearm_after_clear():
    pt, ept = make_space(1)
    pt.write_page(0, ept)
    ept.clear_dirty([100])
    assert not ept.is_dirty(100)
    out = pt.write_page(0, ept)
    assert out.ept_dirty_set  # harvesting re-arms logging


def test_ept_dirty_set_once_per_gpa_across_aliases():
    pt, ept = make_space(0)
    pt.map_page(3, 50)
    pt.map_page(4, 50)
    ept.map_gpa(50, 9000)
    assert pt.write_page(3, ept).ept_dirty_set
    assert not pt.write_page(4, ept).ept_dirty_set  # same GPA, already dirty


def test_write_protect_faults_without_side_effects():
    pt, ept = make_space(1)
    pt.set_write_protect([0])
    out = pt.write_page(0, ept)
    assert out.fault == "write_protect"
    assert not pt.entries[0].flags.dirty
    assert not ept.is_dirty(100)
    # fault handler completes the write on the process's behalf
    done = pt.write_page(0, ept, ignore_protection=True)
    assert done.completed and done.ept_dirty_set


def test_write_not_present_faults():
    pt, ept = make_space(1)
    pt.entries[0].flags.present = False
    assert pt.write_page(0, ept).fault == "not_present"
    assert pt.write_page(42, ept).fault == "not_present"


def test_soft_dirty_fault_on_first_write_after_clear():
    pt, ept = make_space(2)
    assert pt.entries[0].flags.soft_dirty  # set at allocation
    cleared = pt.clear_soft_dirty()
    assert cleared == 2
    assert pt.soft_dirty_set() == set()
    out = pt.write_page(0, ept)
    assert out.softdirty_fault  # kernel fault path sets the bit again
    assert pt.soft_dirty_set() == {0}
    assert not pt.write_page(0, ept).softdirty_fault  # only the first write
    # page 1 untouched: appears clean until written
    assert 1 not in pt.soft_dirty_set()


def test_page_flags_validation():
    PageFlags().validate()
    with pytest.raises(ValueError):
        PageFlags(present=False, dirty=True).validate()


def test_ept_errors_and_queries():
    ept = Ept()
    ept.map_gpa(5, 50)
    assert ept.translate(5) == 50
    assert ept.translate(6) is None
    with pytest.raises(UnknownMapping):
        ept.set_dirty(6)
    ept.set_dirty(5)
    assert ept.dirty_gpas() == {5}
    ept.unmap_gpa(5)
    assert 5 not in ept


def test_page_store_payloads():
    store = PageStore(page_size=64)
    store.write_token(7, 123456)
    blob = store.read(7)
    assert len(blob) == 64
    assert int.from_bytes(blob[:8], "little") == 123456
    with pytest.raises(UnknownMapping):
        store.read(8)
    with pytest.raises(ValueError):
        store.write(9, b"x" * 65)


def test_dirty_set_matches_bruteforce_replay_oracle():
    # For random write/unmap/remap traces, the PTE dirty set must equal an
    # independent replay that only tracks mappings and written pages.
    rng = np.random.default_rng(1234)
    for _ in range(200):
        n_pages = int(rng.integers(2, 64))
        pt, ept = make_space(n_pages)
        mapped = set(range(n_pages))
        oracle_dirty: set[int] = set()
        next_gva = n_pages
        for _ in range(int(rng.integers(1, 120))):
            op = rng.integers(0, 10)
            if op < 7:  # write
                if not mapped:
                    continue
                gva = int(sorted(mapped)[int(rng.integers(0, len(mapped)))])
                out = pt.write_page(gva, ept)
                assert out.completed
                oracle_dirty.add(gva)
            elif op < 8 and mapped:  # unmap
                gva = int(sorted(mapped)[int(rng.integers(0, len(mapped)))])
                pt.unmap(gva)
                mapped.discard(gva)
                oracle_dirty.discard(gva)  # page gone, dirty PTE gone with it
            elif mapped:  # remap to a fresh GVA
                gva = int(sorted(mapped)[int(rng.integers(0, len(mapped)))])
                pt.remap(gva, next_gva)
                mapped.discard(gva)
                mapped.add(next_gva)
                if gva in oracle_dirty:
                    # the PTE (and its dirty bit) moved with the mapping
                    oracle_dirty.discard(gva)
                    oracle_dirty.add(next_gva)
                next_gva += 1
        assert pt.dirty_set() == oracle_dirty


def test_reverse_map_inverts_translate_for_stable_mappings():
    rng = np.random.default_rng(99)
    pt, ept = make_space(32)
    for gva in range(32):
        if rng.random() < 0.5:
            pt.write_page(gva, ept)
    for gva in range(32):
        gpa, _ = pt.translate_gva(gva)
        assert pt.reverse_map(gpa) == gva
