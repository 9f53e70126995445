"""Guest/host memory model: page tables, EPT, page store, write pipeline.

Three address layers: guest-virtual (GVA), guest-physical (GPA), and
host-physical (HPA), all tracked at page granularity as integer page
numbers.  A per-process :class:`GuestPageTable` maps GVA pages to GPA pages
(aliasing allowed — several GVAs may share one GPA), and the VM-wide
:class:`Ept` maps GPA pages to HPA pages while owning the hardware dirty
bit that page-modification logging keys off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = [
    "PAGE_SIZE",
    "PageFlags",
    "PageEntry",
    "WriteOutcome",
    "MappingError",
    "UnknownMapping",
    "AlreadyMapped",
    "LOST",
    "GuestPageTable",
    "Ept",
    "PageStore",
]

PAGE_SIZE = 4096

#: Sentinel returned by reverse_map when no GVA currently maps the GPA.
LOST = None


class MappingError(KeyError):
    """Base class for page-table manipulation errors."""


class UnknownMapping(MappingError):
    """Operation referenced a GVA that is not mapped."""


class AlreadyMapped(MappingError):
    """Attempt to map a GVA page that already has a mapping."""


@dataclass
class PageFlags:
    """Per-PTE bookkeeping bits.

    ``soft_dirty`` starts set at allocation (the kernel marks the first
    touch); an explicit soft-dirty clear resets it, and the next write takes
    the kernel fault path that sets it again.
    """

    present: bool = True
    writable: bool = True
    dirty: bool = False
    soft_dirty: bool = True

    def validate(self) -> None:
        if self.dirty and not self.present:
            raise ValueError("dirty page must be present")


@dataclass
class PageEntry:
    gpa: int
    flags: PageFlags = field(default_factory=PageFlags)


@dataclass(frozen=True)
class WriteOutcome:
    """Result of pushing one write through the page-table pipeline.

    ``fault`` is ``None`` for a completed write, or a reason string
    (``"write_protect"`` / ``"not_present"``) when the write stopped at a
    fault and changed nothing.  ``softdirty_fault`` marks the kernel
    soft-dirty fault taken on the first write after a clear.
    ``ept_dirty_set`` is True when this write transitioned the EPT dirty bit
    from clear to set — the condition under which the PML device logs.
    """

    gva: int
    gpa: int | None
    fault: str | None = None
    softdirty_fault: bool = False
    ept_dirty_set: bool = False

    @property
    def completed(self) -> bool:
        return self.fault is None


class GuestPageTable:
    """GVA -> (GPA, flags) map for one process, with a GPA reverse index."""

    def __init__(self, pid: int):
        self.pid = pid
        self.entries: dict[int, PageEntry] = {}
        self._rmap: dict[int, set[int]] = {}

    def __contains__(self, gva: int) -> bool:
        return gva in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def map_page(
        self,
        gva: int,
        gpa: int,
        *,
        writable: bool = True,
        soft_dirty: bool = True,
    ) -> PageEntry:
        if gva in self.entries:
            raise AlreadyMapped(gva)
        entry = PageEntry(gpa, PageFlags(writable=writable, soft_dirty=soft_dirty))
        self.entries[gva] = entry
        self._rmap.setdefault(gpa, set()).add(gva)
        return entry

    def unmap(self, gva: int) -> PageEntry:
        if gva not in self.entries:
            raise UnknownMapping(gva)
        entry = self.entries.pop(gva)
        peers = self._rmap[entry.gpa]
        peers.discard(gva)
        if not peers:
            del self._rmap[entry.gpa]
        return entry

    def remap(self, gva_old: int, gva_new: int) -> PageEntry:
        """Move the GPA backing (and flags) of ``gva_old`` to ``gva_new``."""
        if gva_old not in self.entries:
            raise UnknownMapping(gva_old)
        if gva_new in self.entries:
            raise AlreadyMapped(gva_new)
        entry = self.unmap(gva_old)
        self.entries[gva_new] = entry
        self._rmap.setdefault(entry.gpa, set()).add(gva_new)
        return entry

    def translate_gva(self, gva: int) -> tuple[int, PageFlags] | None:
        """Mapping for ``gva``, or None when not mapped.  No state change."""
        entry = self.entries.get(gva)
        if entry is None or not entry.flags.present:
            return None
        return entry.gpa, entry.flags

    def reverse_map(self, gpa: int) -> int | None:
        """Some GVA currently mapping ``gpa``; lowest page number on aliases.

        Returns :data:`LOST` (None) when no GVA maps the GPA — the
        missed-address pathology of GPA-level logging.
        """
        gvas = self._rmap.get(gpa)
        if not gvas:
            return LOST
        return min(gvas)

    def write_page(self, gva: int, ept: "Ept", *, ignore_protection: bool = False) -> WriteOutcome:
        """One store to ``gva``: fault checks, then PTE/EPT dirty updates.

        A write-protected or non-present page faults and changes nothing
        (the caller models the fault handling and may complete the write
        afterwards with ``ignore_protection=True``).  A completed write sets
        the PTE dirty bit, sets soft-dirty (flagging the kernel fault if it
        was clear), and sets the EPT dirty bit for the backing GPA,
        reporting whether that was a clear-to-set transition.
        """
        entry = self.entries.get(gva)
        if entry is None or not entry.flags.present:
            return WriteOutcome(gva=gva, gpa=None, fault="not_present")
        if not entry.flags.writable and not ignore_protection:
            return WriteOutcome(gva=gva, gpa=entry.gpa, fault="write_protect")
        flags = entry.flags
        flags.dirty = True
        softdirty_fault = not flags.soft_dirty
        flags.soft_dirty = True
        transitioned = ept.set_dirty(entry.gpa)
        return WriteOutcome(
            gva=gva,
            gpa=entry.gpa,
            softdirty_fault=softdirty_fault,
            ept_dirty_set=transitioned,
        )

    def clear_soft_dirty(self) -> int:
        """Clear every soft-dirty bit; returns how many were set."""
        cleared = 0
        for entry in self.entries.values():
            if entry.flags.soft_dirty:
                entry.flags.soft_dirty = False
                cleared += 1
        return cleared

    def soft_dirty_set(self) -> set[int]:
        return {g for g, e in self.entries.items() if e.flags.soft_dirty}

    def dirty_set(self) -> set[int]:
        return {g for g, e in self.entries.items() if e.flags.dirty}

    def set_write_protect(self, gvas, protected: bool = True) -> None:
        for gva in gvas:
            if gva not in self.entries:
                raise UnknownMapping(gva)
            self.entries[gva].flags.writable = not protected


class Ept:
    """VM-wide GPA -> HPA map with per-entry hardware dirty bits."""

    def __init__(self):
        self.entries: dict[int, list] = {}  # gpa -> [hpa, dirty]

    def __contains__(self, gpa: int) -> bool:
        return gpa in self.entries

    def map_gpa(self, gpa: int, hpa: int) -> None:
        self.entries[gpa] = [hpa, False]

    def unmap_gpa(self, gpa: int) -> None:
        self.entries.pop(gpa, None)

    def translate(self, gpa: int) -> int | None:
        entry = self.entries.get(gpa)
        return None if entry is None else entry[0]

    def set_dirty(self, gpa: int) -> bool:
        """Set the dirty bit; True when this was a clear-to-set transition."""
        entry = self.entries.get(gpa)
        if entry is None:
            raise UnknownMapping(gpa)
        was = entry[1]
        entry[1] = True
        return not was

    def is_dirty(self, gpa: int) -> bool:
        entry = self.entries.get(gpa)
        return bool(entry and entry[1])

    def clear_dirty(self, gpas) -> None:
        """Re-arm logging for ``gpas``: the next write transitions again."""
        for gpa in gpas:
            entry = self.entries.get(gpa)
            if entry is not None:
                entry[1] = False

    def dirty_gpas(self) -> set[int]:
        return {g for g, e in self.entries.items() if e[1]}


class PageStore:
    """HPA -> payload bytes.  Payloads are optional per simulation.

    Tracking-only experiments run metadata-free; checkpoint/restore
    experiments enable payloads so dumps can be verified byte-exactly.
    Content is written as a fixed page-size block.
    """

    def __init__(self, page_size: int = PAGE_SIZE):
        self.page_size = page_size
        self.contents: dict[int, bytes] = {}

    def write(self, hpa: int, payload: bytes) -> None:
        if len(payload) > self.page_size:
            raise ValueError("payload exceeds page size")
        self.contents[hpa] = payload.ljust(self.page_size, b"\x00")

    def write_token(self, hpa: int, token: int) -> None:
        """Deterministic synthetic content for write number ``token``."""
        self.write(hpa, token.to_bytes(8, "little"))

    def read(self, hpa: int) -> bytes:
        if hpa not in self.contents:
            raise UnknownMapping(hpa)
        return self.contents[hpa]

    def __contains__(self, hpa: int) -> bool:
        return hpa in self.contents
