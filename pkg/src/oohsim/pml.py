"""Hardware model of page-modification logging and its guest extension.

A :class:`PmlBuffer` is the 512-entry log with the decrementing index: a
fresh buffer starts at index 511, each logged entry lands at the current
index and decrements it, and the attempt that would push the index below
zero is refused and raises the buffer-full signal instead (the refused
entry is replayed by the handler after the index is reset).  Index 512
disables logging outright.

:class:`PmlState` pairs the hypervisor-level GPA buffer with the optional
guest-level GVA buffer of the extended design, where one write logs into
both buffers independently; the hypervisor buffer signals fullness with a
vmexit while the guest buffer posts a virtual self-IPI.  Guest access to
the device fields goes through a :class:`ShadowVmcs` under read/write
bitmap control.
"""

from __future__ import annotations

from dataclasses import dataclass, field

__all__ = [
    "BUFFER_SLOTS",
    "INDEX_FRESH",
    "INDEX_DISABLED",
    "LogResult",
    "LogOutcome",
    "InvalidIndexValue",
    "TrapViolation",
    "TranslationFault",
    "PmlBuffer",
    "PmlState",
    "ShadowVmcs",
    "FIELD_GUEST_PML_ADDRESS",
    "FIELD_GUEST_PML_INDEX",
]

BUFFER_SLOTS = 512
INDEX_FRESH = 511
INDEX_DISABLED = 512


class LogResult:
    LOGGED = "logged"
    FULL = "full"
    DISABLED = "disabled"


class InvalidIndexValue(ValueError):
    """Index writes accept only the protocol values 511 and 512."""


class TrapViolation(Exception):
    """Guest touched a shadow-VMCS field outside its access bitmap."""


class TranslationFault(Exception):
    """Guest PML address written with a GPA that has no EPT mapping."""


@dataclass
class PmlBuffer:
    """One log buffer with Intel-style decrementing index arithmetic.

    With the hardware geometry of 512 slots, ``index`` ranges over
    [-1, 512]: 511..0 while filling, -1 once all 512 slots are used (the
    underflowed state in which the next attempt raises the full signal),
    512 when logging is disabled.  ``slots`` scales that geometry down for
    exhaustive state-space exploration; the protocol is unchanged (fresh
    index = slots - 1, disabled index = slots).  ``entries`` holds the
    logged payloads in logging order; ``drops_while_full`` counts refused
    attempts (net loss only if the caller never replays them).
    """

    index: int | None = None
    entries: list = field(default_factory=list)
    drops_while_full: int = 0
    slots: int = BUFFER_SLOTS

    def __post_init__(self) -> None:
        if self.index is None:
            self.index = self.slots  # disabled until explicitly armed

    @property
    def fresh_index(self) -> int:
        return self.slots - 1

    @property
    def disabled_index(self) -> int:
        return self.slots

    @property
    def armed(self) -> bool:
        return 0 <= self.index <= self.fresh_index

    @property
    def full(self) -> bool:
        return self.index < 0

    @property
    def retrievable(self) -> int:
        """Entries available to a drain: fresh - index (0 when disabled)."""
        if self.index == self.disabled_index:
            return 0
        return self.fresh_index - self.index

    @property
    def slots_left(self) -> int:
        return self.index + 1 if self.index >= 0 else 0

    def log(self, entry) -> str:
        if self.index == self.disabled_index:
            return LogResult.DISABLED
        if self.index < 0:
            self.drops_while_full += 1
            return LogResult.FULL
        self.entries.append(entry)
        self.index -= 1
        return LogResult.LOGGED

    def drain(self) -> list:
        """Take all entries and re-arm (copy-then-reset handler order).

        A disabled buffer stays disabled; use :meth:`reset` to pick a
        different index explicitly.
        """
        taken = self.entries
        self.entries = []
        if self.index != self.disabled_index:
            self.index = self.fresh_index
        return taken

    def reset(self, value: int) -> None:
        if value not in (self.fresh_index, self.disabled_index):
            raise InvalidIndexValue(value)
        self.index = value
        self.entries = []


@dataclass
class PmlState:
    """Per-vCPU device state: hypervisor buffer plus optional guest buffer.

    Buffer payloads: the hypervisor buffer logs ``(gpa, meta_gva)`` tuples —
    the GPA is what the device records; the write-time GVA rides along as
    simulator ground truth for diagnosing lost/inaccurate reverse mappings
    and is never visible to modeled guest code.  The guest buffer logs GVAs.
    """

    pml_address: int = 0
    hv_buffer: PmlBuffer = field(default_factory=PmlBuffer)
    epml_enabled: bool = False
    guest_pml_address: int = 0  # stored as HPA (translated at vmwrite)
    guest_buffer: PmlBuffer = field(default_factory=PmlBuffer)

    def log_dirty(self, gpa: int, gva: int) -> "LogOutcome":
        """Log one EPT dirty-bit transition into the armed buffer(s)."""
        hv = self.hv_buffer.log((gpa, gva))
        guest = None
        if self.epml_enabled:
            guest = self.guest_buffer.log(gva)
        return LogOutcome(hv=hv, guest=guest)


@dataclass(frozen=True)
class LogOutcome:
    hv: str
    guest: str | None

    @property
    def hv_full(self) -> bool:
        return self.hv == LogResult.FULL

    @property
    def guest_full(self) -> bool:
        return self.guest == LogResult.FULL


FIELD_GUEST_PML_ADDRESS = "guest_pml_address"
FIELD_GUEST_PML_INDEX = "guest_pml_index"


@dataclass
class ShadowVmcs:
    """Guest-visible window onto the device fields, gated by bitmaps."""

    state: PmlState
    vmread_bitmap: set = field(
        default_factory=lambda: {FIELD_GUEST_PML_ADDRESS, FIELD_GUEST_PML_INDEX}
    )
    vmwrite_bitmap: set = field(
        default_factory=lambda: {FIELD_GUEST_PML_ADDRESS, FIELD_GUEST_PML_INDEX}
    )

    def guest_vmwrite(self, fld: str, value: int, ept=None) -> None:
        """Write a shadow field without a vmexit (cost M8, charged by caller).

        Writing the guest PML address takes a GPA and stores its HPA (EPT
        translation happens at write time); writing the index accepts only
        the protocol values 511/512.
        """
        if fld not in self.vmwrite_bitmap:
            raise TrapViolation(fld)
        if fld == FIELD_GUEST_PML_ADDRESS:
            if ept is None:
                raise TranslationFault("no EPT context for translation")
            hpa = ept.translate(value)
            if hpa is None:
                raise TranslationFault(value)
            self.state.guest_pml_address = hpa
        elif fld == FIELD_GUEST_PML_INDEX:
            self.state.guest_buffer.reset(value)
        else:  # pragma: no cover - bitmap only admits the two fields
            raise TrapViolation(fld)

    def guest_vmread(self, fld: str) -> int:
        """Read a shadow field without a vmexit (cost M7, charged by caller)."""
        if fld not in self.vmread_bitmap:
            raise TrapViolation(fld)
        if fld == FIELD_GUEST_PML_ADDRESS:
            return self.state.guest_pml_address
        if fld == FIELD_GUEST_PML_INDEX:
            return self.state.guest_buffer.index
        raise TrapViolation(fld)  # pragma: no cover


def reset_index(state: PmlState, which: str, value: int) -> None:
    """Reset one buffer's index to 511 (re-arm) or 512 (disable)."""
    if which == "hypervisor":
        state.hv_buffer.reset(value)
    elif which == "guest":
        state.guest_buffer.reset(value)
    else:
        raise ValueError(f"unknown buffer {which!r}")
