"""Guest-kernel side: processes, the tracking tool's kernel module, and the
kernel services each technique relies on.

The :class:`GuestKernel` glues per-process page tables to the hypervisor's
log device and charges every kernel-level cost into the run's ledger:

* registration/unregistration of the tracked process (hypercall round trips),
* scheduler callbacks at quantum boundaries (enable/disable hypercalls on the
  shared pathway; shadow-field accesses in extended mode),
* the softirq bottom half that copies the guest-level log buffer into the
  tool's ring when the device posts a self-IPI,
* soft-dirty bookkeeping (``clear_refs``-style clearing and pagemap-style
  reads, with a residue set so pages unmapped mid-interval are still
  reported), and
* write-protect fault registration/recording for the userspace-fault
  technique.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .costs import CostLedger, CostTable
from .hypervisor import Hypervisor
from .memory import Ept, GuestPageTable
from .pml import (
    FIELD_GUEST_PML_ADDRESS,
    FIELD_GUEST_PML_INDEX,
    ShadowVmcs,
)

__all__ = [
    "AlreadyRegistered",
    "NotRegistered",
    "TECHNIQUES",
    "Process",
    "SchedulerConfig",
    "UioModuleState",
    "GuestKernel",
    "GUEST_RING_GPA",
]

TECHNIQUES = ("proc", "uffd", "spml", "epml")

#: Fixed guest-physical address of the page backing the guest-level log
#: buffer (mapped at registration so the shadow-field write can translate).
GUEST_RING_GPA = 0x7F_F000


class AlreadyRegistered(RuntimeError):
    """A tracked process is already registered with the tool."""


class NotRegistered(RuntimeError):
    """Operation requires a registered tracked process."""


@dataclass
class Process:
    pid: int
    table: GuestPageTable
    name: str = ""
    # soft-dirty pages unmapped before the interval's pagemap read; the
    # kernel reports them so no dirtied page is lost to address-space churn
    softdirty_residue: set[int] = field(default_factory=set)
    # write-protect fault registration for the userspace-fault technique
    uffd_mode: str | None = None
    uffd_dirty: set[int] = field(default_factory=set)


@dataclass
class SchedulerConfig:
    quantum_us: float = 10_000.0
    competitors: int = 0


@dataclass
class UioModuleState:
    """Registration record of the in-guest tracking tool's kernel module."""

    technique: str
    pid: int
    memory_bytes: int
    ring_capacity: int
    # tool-visible ring of harvested virtual addresses (extended mode; the
    # shared pathway consumes the hypervisor ring directly)
    ring: list[int] = field(default_factory=list)
    ring_dropped: int = 0
    scheduled_in: bool = False

    @property
    def ring_free(self) -> int:
        return max(0, self.ring_capacity - len(self.ring))


class GuestKernel:
    """Kernel-level mechanics shared by the four tracking techniques."""

    def __init__(
        self,
        hv: Hypervisor,
        table: CostTable,
        ledger: CostLedger,
        ept: Ept,
        sched: SchedulerConfig | None = None,
        ring_capacity: int = 16384,
    ):
        self.hv = hv
        self.costs = table
        self.ledger = ledger
        self.ept = ept
        self.sched = sched or SchedulerConfig()
        self.ring_capacity = ring_capacity
        self.processes: dict[int, Process] = {}
        self.uio: UioModuleState | None = None
        self.shadow: ShadowVmcs | None = None

    # ------------------------------------------------------------ processes

    def new_process(self, pid: int, name: str = "") -> Process:
        if pid in self.processes:
            raise AlreadyRegistered(f"pid {pid} exists")
        proc = Process(pid=pid, table=GuestPageTable(pid), name=name)
        self.processes[pid] = proc
        return proc

    def _proc(self, pid: int) -> Process:
        try:
            return self.processes[pid]
        except KeyError:
            raise NotRegistered(f"no such pid {pid}") from None

    def note_unmap(self, pid: int, gva: int) -> None:
        """Capture the soft-dirty residue before a page leaves the table."""
        proc = self._proc(pid)
        entry = proc.table.entries.get(gva)
        if entry is not None and entry.flags.soft_dirty:
            proc.softdirty_residue.add(gva)

    # --------------------------------------------------------- registration

    def register_tracked(self, pid: int, technique: str, memory_bytes: int) -> None:
        if technique not in TECHNIQUES:
            raise ValueError(f"unknown technique {technique!r}")
        if self.uio is not None:
            raise AlreadyRegistered(f"tool already tracks pid {self.uio.pid}")
        proc = self._proc(pid)
        if technique == "spml":
            self.ledger.charge("M9", self.costs.cost_us("M9"))
            self.hv.hypercall("init_pml")
        elif technique == "epml":
            self.ledger.charge("M10", self.costs.cost_us("M10"))
            self.hv.hypercall("init_shadow_vmcs")
            self.shadow = ShadowVmcs(self.hv.pml)
            if self.ept.translate(GUEST_RING_GPA) is None:
                self.ept.map_gpa(GUEST_RING_GPA, GUEST_RING_GPA | 0x8000_0000)
        elif technique == "uffd":
            self.ledger.charge("M1", self.costs.cost_us("M1"))
            proc.uffd_mode = "write_protect"
            proc.table.set_write_protect(list(proc.table.entries), True)
        else:  # proc: open the pagemap/clear interfaces
            self.ledger.charge("M1", self.costs.cost_us("M1"))
        self.uio = UioModuleState(
            technique=technique,
            pid=pid,
            memory_bytes=memory_bytes,
            ring_capacity=self.ring_capacity,
        )

    def unregister(self) -> None:
        if self.uio is None:
            raise NotRegistered("no tracked process")
        technique = self.uio.technique
        if technique == "spml":
            self.ledger.charge("M11", self.costs.cost_us("M11"))
            self.hv.hypercall("deactivate_pml")
        elif technique == "epml":
            self.ledger.charge("M12", self.costs.cost_us("M12"))
            self.hv.hypercall("deactivate_shadow_vmcs")
            self.shadow = None
        elif technique == "uffd":
            proc = self._proc(self.uio.pid)
            proc.uffd_mode = None
        self.uio = None

    # ------------------------------------------------------------ scheduling

    def on_schedule(self, pid: int, direction: str) -> float:
        """Scheduler callback for the tracked process; returns the µs charged.

        Untracked processes cost nothing here.  Every call on the tracked
        process bumps the ``sched_events`` counter — the N that the
        performance estimator consumes.
        """
        if direction not in ("in", "out"):
            raise ValueError(f"direction must be 'in' or 'out', got {direction!r}")
        uio = self.uio
        if uio is None or uio.pid != pid:
            return 0.0
        self.ledger.bump("sched_events")
        uio.scheduled_in = direction == "in"
        if uio.technique == "spml":
            if direction == "in":
                us = self.costs.cost_us("M13")
                self.ledger.charge("M13", us)
                self.hv.hypercall("enable_logging", pid=pid)
            else:
                us = self.costs.cost_us("M14", uio.memory_bytes)
                self.ledger.charge("M14", us)
                self.hv.hypercall("disable_logging")
            return us
        if uio.technique == "epml":
            m7 = self.costs.cost_us("M7")
            m8 = self.costs.cost_us("M8")
            if direction == "in":
                # point the device at this process's buffer, then arm it
                self.shadow.guest_vmwrite(
                    FIELD_GUEST_PML_ADDRESS, GUEST_RING_GPA, ept=self.ept
                )
                fresh = self.hv.pml.guest_buffer.fresh_index
                self.shadow.guest_vmwrite(FIELD_GUEST_PML_INDEX, fresh)
                us = 2 * m8
                self.ledger.charge("M8", m8, count=2)
                self.hv.coordinate("sched_in", pid=pid)
            else:
                # read how far the buffer filled, drain the leftovers to the
                # tool ring, then park the device
                self.shadow.guest_vmread(FIELD_GUEST_PML_INDEX)
                _, drain_us = self.deliver_guest_buffer_full(pid)
                buf = self.hv.pml.guest_buffer
                if buf.entries:  # tool ring saturated: parking loses these
                    uio.ring_dropped += len(buf.entries)
                self.shadow.guest_vmwrite(FIELD_GUEST_PML_INDEX, buf.disabled_index)
                us = m7 + m8 + drain_us
                self.ledger.charge("M7", m7)
                self.ledger.charge("M8", m8)
                self.hv.coordinate("sched_out")
            return us
        return 0.0  # proc/uffd: kernel techniques need no per-schedule work

    # ------------------------------------------------- guest buffer servicing

    def deliver_guest_buffer_full(self, pid: int) -> tuple[int, float]:
        """Softirq bottom half: copy the guest-level buffer to the tool ring.

        Copies what fits (per-entry copy charged at the sized ring-copy
        rate), re-arms the buffer only when fully emptied, and treats a
        delivery with nothing buffered as a spurious wakeup.  Returns
        (entries copied, µs charged).
        """
        uio = self.uio
        if uio is None or uio.technique != "epml" or uio.pid != pid:
            return 0, 0.0
        buf = self.hv.pml.guest_buffer
        pending = len(buf.entries)
        if pending == 0:
            return 0, 0.0  # spurious
        take = min(pending, uio.ring_free)
        if take == 0:
            return 0, 0.0  # ring saturated: buffer stays paused
        copied = buf.entries[:take]
        del buf.entries[:take]
        proc = self._proc(pid)
        for gva in copied:
            uio.ring.append(gva)
            entry = proc.table.entries.get(gva)
            if entry is not None and self.ept.is_dirty(entry.gpa):
                self.ept.clear_dirty([entry.gpa])  # re-arm: next write re-logs
        if not buf.entries and buf.index != buf.disabled_index:
            buf.index = buf.fresh_index
        per_entry = self.costs.per_page_us("M18", uio.memory_bytes)
        us = self.costs.cost_us("M1") + take * per_entry
        self.ledger.charge("M1", self.costs.cost_us("M1"))
        self.ledger.charge("M18", take * per_entry, count=take)
        self.ledger.bump("softirq_copies")
        return take, us

    def epml_consume_ring(self, max_n: int | None = None) -> list[int]:
        """Tool side: take harvested virtual addresses off the ring."""
        if self.uio is None or self.uio.technique != "epml":
            raise NotRegistered("extended-mode tool is not registered")
        n = len(self.uio.ring) if max_n is None else min(max_n, len(self.uio.ring))
        out = self.uio.ring[:n]
        del self.uio.ring[:n]
        return out

    # ------------------------------------------------------ soft-dirty (proc)

    def clear_soft_dirty(self, pid: int) -> tuple[int, float]:
        """Clear all soft-dirty bits (suspends the process); (count, µs)."""
        uio = self.uio
        if uio is None or uio.pid != pid:
            raise NotRegistered(f"pid {pid} is not tracked")
        proc = self._proc(pid)
        us = self.costs.cost_us("M15", uio.memory_bytes)
        self.ledger.charge("M15", us)
        count = proc.table.clear_soft_dirty()
        proc.softdirty_residue.clear()
        return count, us

    def read_pagemap(self, pid: int) -> tuple[set[int], float]:
        """Walk the pagemap (suspends the process); returns (dirty GVAs, µs).

        Reports live soft-dirty pages plus the residue of pages unmapped
        since the last clear.
        """
        uio = self.uio
        if uio is None or uio.pid != pid:
            raise NotRegistered(f"pid {pid} is not tracked")
        proc = self._proc(pid)
        us = self.costs.cost_us("M16", uio.memory_bytes)
        self.ledger.charge("M16", us)
        return proc.table.soft_dirty_set() | set(proc.softdirty_residue), us

    # ------------------------------------------------- userspace-fault (uffd)

    def uffd_record(self, pid: int, gva: int) -> None:
        """Monitor thread records a write-protect fault's address."""
        proc = self._proc(pid)
        if proc.uffd_mode is None:
            raise NotRegistered(f"pid {pid} has no fault registration")
        proc.uffd_dirty.add(gva)

    def uffd_harvest(self, pid: int) -> set[int]:
        proc = self._proc(pid)
        if proc.uffd_mode is None:
            raise NotRegistered(f"pid {pid} has no fault registration")
        out = set(proc.uffd_dirty)
        proc.uffd_dirty.clear()
        return out
