"""Guest-kernel services: registration, scheduling, softirq copy, soft-dirty."""

from __future__ import annotations

import pytest

from oohsim.costs import CostLedger, CostTable
from oohsim.guest import (
    GUEST_RING_GPA,
    AlreadyRegistered,
    GuestKernel,
    NotRegistered,
)
from oohsim.hypervisor import Hypervisor
from oohsim.memory import Ept

MB = 1 << 20


def make_kernel(ring_capacity: int = 16384):
    hv = Hypervisor()
    kern = GuestKernel(
        hv, CostTable.default(), CostLedger(), Ept(), ring_capacity=ring_capacity
    )
    return kern, hv


def map_pages(kern: GuestKernel, pid: int, n: int, base: int = 0x1000):
    proc = kern.processes[pid]
    for i in range(n):
        gva = base + i * 0x1000
        gpa = 0x100000 + i * 0x1000
        kern.ept.map_gpa(gpa, 0x9000000 + i * 0x1000)
        proc.table.map_page(gva, gpa)
    return proc


# -------------------------------------------------------------- registration


def test_register_charges_the_init_hypercall():
    for technique, metric in (("spml", "M9"), ("epml", "M10")):
        kern, hv = make_kernel()
        kern.new_process(7)
        kern.register_tracked(7, technique, 100 * MB)
        expected = CostTable.default().cost_us(metric)
        assert kern.ledger.totals_us[metric] == expected
        assert hv.flags.enable_by_guest
    kern, hv = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "proc", 100 * MB)
    assert "M9" not in kern.ledger.totals_us and "M10" not in kern.ledger.totals_us


def test_register_twice_rejected():
    kern, _ = make_kernel()
    kern.new_process(7)
    kern.new_process(8)
    kern.register_tracked(7, "proc", MB)
    with pytest.raises(AlreadyRegistered):
        kern.register_tracked(8, "proc", MB)


def test_register_unknown_technique_rejected():
    kern, _ = make_kernel()
    kern.new_process(7)
    with pytest.raises(ValueError):
        kern.register_tracked(7, "carrier-pigeon", MB)


def test_duplicate_pid_rejected():
    kern, _ = make_kernel()
    kern.new_process(7)
    with pytest.raises(AlreadyRegistered):
        kern.new_process(7)


def test_epml_register_maps_the_guest_ring_page():
    kern, hv = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "epml", MB)
    assert hv.pml.epml_enabled
    assert kern.ept.translate(GUEST_RING_GPA) is not None


def test_unregister_charges_deactivation():
    kern, hv = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "spml", MB)
    kern.unregister()
    assert kern.ledger.totals_us["M11"] == CostTable.default().cost_us("M11")
    assert not hv.flags.enable_by_guest
    with pytest.raises(NotRegistered):
        kern.unregister()

    kern, hv = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "epml", MB)
    kern.unregister()
    assert kern.ledger.totals_us["M12"] == CostTable.default().cost_us("M12")
    assert not hv.pml.epml_enabled


# ---------------------------------------------------------------- scheduling


def test_untracked_pid_schedules_for_free():
    kern, _ = make_kernel()
    kern.new_process(7)
    kern.new_process(9)
    kern.register_tracked(7, "spml", MB)
    assert kern.on_schedule(9, "in") == 0.0
    assert kern.ledger.count("sched_events") == 0


def test_spml_schedule_pair_charges_hypercalls():
    table = CostTable.default()
    kern, hv = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "spml", 100 * MB)
    us_in = kern.on_schedule(7, "in")
    assert us_in == table.cost_us("M13")
    assert hv.pml.hv_buffer.armed
    us_out = kern.on_schedule(7, "out")
    assert us_out == table.cost_us("M14", 100 * MB)
    assert not hv.pml.hv_buffer.armed
    assert kern.ledger.count("sched_events") == 2


def test_epml_schedule_pair_is_three_writes_one_read():
    table = CostTable.default()
    kern, hv = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "epml", 100 * MB)
    us_in = kern.on_schedule(7, "in")
    assert us_in == pytest.approx(2 * table.cost_us("M8"))
    assert hv.pml.guest_buffer.armed
    us_out = kern.on_schedule(7, "out")
    assert us_out == pytest.approx(table.cost_us("M7") + table.cost_us("M8"))
    assert not hv.pml.guest_buffer.armed
    total = us_in + us_out
    assert total == pytest.approx(3 * table.cost_us("M8") + table.cost_us("M7"))
    assert total == pytest.approx(3.339)


def test_epml_sched_out_drains_leftovers_to_tool_ring():
    kern, hv = make_kernel()
    kern.new_process(7)
    map_pages(kern, 7, 3)
    kern.register_tracked(7, "epml", MB)
    kern.on_schedule(7, "in")
    for i in range(3):
        hv.pml.log_dirty(0x100000 + i * 0x1000, 0x1000 + i * 0x1000)
    kern.on_schedule(7, "out")
    assert sorted(kern.uio.ring) == [0x1000, 0x2000, 0x3000]
    assert kern.uio.ring_dropped == 0


def test_bad_direction_rejected():
    kern, _ = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "proc", MB)
    with pytest.raises(ValueError):
        kern.on_schedule(7, "sideways")


# ------------------------------------------------------------ softirq copies


def _epml_kernel_with_entries(n: int, ring_capacity: int = 16384):
    kern, hv = make_kernel(ring_capacity=ring_capacity)
    kern.new_process(7)
    map_pages(kern, 7, n)
    kern.register_tracked(7, "epml", MB)
    kern.on_schedule(7, "in")
    for i in range(n):
        gva = 0x1000 + i * 0x1000
        gpa = 0x100000 + i * 0x1000
        kern.ept.set_dirty(gpa)
        hv.pml.log_dirty(gpa, gva)
    return kern, hv


def test_softirq_copy_charges_ring_copy_rate():
    kern, hv = _epml_kernel_with_entries(5)
    copied, us = kern.deliver_guest_buffer_full(7)
    assert copied == 5
    table = CostTable.default()
    assert us == pytest.approx(
        table.cost_us("M1") + 5 * table.per_page_us("M18", MB)
    )
    assert len(kern.uio.ring) == 5
    assert hv.pml.guest_buffer.armed  # fully drained: re-armed
    assert kern.ledger.count("softirq_copies") == 1


def test_softirq_copy_rearms_ept_dirty_bits():
    kern, _ = _epml_kernel_with_entries(2)
    assert kern.ept.is_dirty(0x100000)
    kern.deliver_guest_buffer_full(7)
    assert not kern.ept.is_dirty(0x100000)
    assert not kern.ept.is_dirty(0x101000)


def test_softirq_partial_copy_holds_remainder():
    kern, hv = _epml_kernel_with_entries(6, ring_capacity=4)
    copied, _ = kern.deliver_guest_buffer_full(7)
    assert copied == 4
    assert len(hv.pml.guest_buffer.entries) == 2  # held, logging still paused
    copied, us = kern.deliver_guest_buffer_full(7)
    assert copied == 0 and us == 0.0  # ring still saturated
    kern.epml_consume_ring()
    copied, _ = kern.deliver_guest_buffer_full(7)
    assert copied == 2
    assert sorted(kern.epml_consume_ring()) == [0x5000, 0x6000]


def test_spurious_softirq_is_a_no_op():
    kern, _ = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "epml", MB)
    assert kern.deliver_guest_buffer_full(7) == (0, 0.0)


def test_consume_ring_requires_extended_mode():
    kern, _ = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "proc", MB)
    with pytest.raises(NotRegistered):
        kern.epml_consume_ring()


# ------------------------------------------------------- soft-dirty services


def test_pagemap_reports_live_and_residue_pages():
    kern, _ = make_kernel()
    kern.new_process(7)
    proc = map_pages(kern, 7, 4)
    kern.register_tracked(7, "proc", MB)
    kern.clear_soft_dirty(7)  # allocation marks pages soft-dirty: start clean
    ept = kern.ept
    proc.table.write_page(0x1000, ept)
    proc.table.write_page(0x2000, ept)
    kern.note_unmap(7, 0x2000)
    proc.table.unmap(0x2000)
    dirty, us = kern.read_pagemap(7)
    assert dirty == {0x1000, 0x2000}  # unmapped page survives via residue
    assert us == CostTable.default().cost_us("M16", MB)


def test_clear_soft_dirty_resets_everything():
    kern, _ = make_kernel()
    kern.new_process(7)
    proc = map_pages(kern, 7, 3)
    kern.register_tracked(7, "proc", MB)
    count, us = kern.clear_soft_dirty(7)
    assert count == 3  # allocation had marked all three
    assert us == CostTable.default().cost_us("M15", MB)
    dirty, _ = kern.read_pagemap(7)
    assert dirty == set()
    proc.table.write_page(0x1000, kern.ept)
    kern.note_unmap(7, 0x1000)
    proc.table.unmap(0x1000)
    kern.clear_soft_dirty(7)  # also clears the residue
    dirty, _ = kern.read_pagemap(7)
    assert dirty == set()


def test_soft_dirty_services_require_tracked_pid():
    kern, _ = make_kernel()
    kern.new_process(7)
    kern.new_process(9)
    kern.register_tracked(7, "proc", MB)
    with pytest.raises(NotRegistered):
        kern.clear_soft_dirty(9)
    with pytest.raises(NotRegistered):
        kern.read_pagemap(9)


# ------------------------------------------------------------- fault records


def test_uffd_record_and_harvest():
    kern, _ = make_kernel()
    kern.new_process(7)
    map_pages(kern, 7, 2)
    kern.register_tracked(7, "uffd", MB)
    kern.uffd_record(7, 0x1000)
    kern.uffd_record(7, 0x2000)
    kern.uffd_record(7, 0x1000)
    assert kern.uffd_harvest(7) == {0x1000, 0x2000}
    assert kern.uffd_harvest(7) == set()


def test_uffd_register_write_protects_existing_pages():
    kern, _ = make_kernel()
    kern.new_process(7)
    proc = map_pages(kern, 7, 2)
    kern.register_tracked(7, "uffd", MB)
    outcome = proc.table.write_page(0x1000, kern.ept)
    assert outcome.fault == "write_protect"


def test_uffd_record_requires_registration():
    kern, _ = make_kernel()
    kern.new_process(7)
    with pytest.raises(NotRegistered):
        kern.uffd_record(7, 0x1000)
    with pytest.raises(NotRegistered):
        kern.uffd_harvest(7)


def test_sched_event_count_matches_ledger():
    kern, _ = make_kernel()
    kern.new_process(7)
    kern.register_tracked(7, "epml", MB)
    for _ in range(5):
        kern.on_schedule(7, "in")
        kern.on_schedule(7, "out")
    assert kern.ledger.count("sched_events") == 10
