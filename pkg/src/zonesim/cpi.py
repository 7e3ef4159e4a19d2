"""Code-pointer integrity: type IDs, the pointer-integrity memory (PIM) and
the guarded control stack.

Tagged function pointers keep the PIM slot index in bits 63:48 and the code
address in bits 47:0.  Index ``0xFFFF`` marks an untagged pointer.  Every
PIM write goes through the core's access pipeline as a GCS store, so a
mislabelled PIM page surfaces as a fault instead of a silent write.
"""
from __future__ import annotations

import enum
import hashlib
import re
from dataclasses import dataclass, field
from typing import List, Optional

from .core import AccessKind, AddressSpace, CoreState, Machine, Mode
from .domains import CostModel

ADDR_BITS = 48
ADDR_MASK = (1 << ADDR_BITS) - 1
INDEX_SENTINEL = 0xFFFF
PIM_ENTRY_BYTES = 16
DEFAULT_PIM_CAPACITY = 4096

_WS = re.compile(r"\s+")


def canonical_signature(sig: str) -> str:
    """``ret(arg,arg)`` with all whitespace removed."""
    canon = _WS.sub("", sig)
    if not canon or "(" not in canon or not canon.endswith(")"):
        raise ValueError(f"malformed function signature {sig!r}")
    return canon


def type_id(signature: str) -> int:
    """First 8 bytes of SHAKE-128 over the canonical signature, big-endian."""
    data = canonical_signature(signature).encode("utf-8")
    return int.from_bytes(hashlib.shake_128(data).digest(8), "big")


def tag(addr: int, index: int) -> int:
    if not 0 <= index < INDEX_SENTINEL:
        raise ValueError(f"slot index {index} out of range")
    return (index << ADDR_BITS) | (addr & ADDR_MASK)


def untag(value: int) -> int:
    return value & ADDR_MASK


def tag_index(value: int) -> int:
    return (value >> ADDR_BITS) & 0xFFFF


def untagged(addr: int) -> int:
    return (INDEX_SENTINEL << ADDR_BITS) | (addr & ADDR_MASK)


class ViolationKind(enum.Enum):
    OUT_OF_RANGE = "OutOfRange"
    ADDR_MISMATCH = "AddrMismatch"
    TYPE_MISMATCH = "TypeMismatch"


class CpiViolation(Exception):
    def __init__(self, kind: ViolationKind, detail: str = ""):
        super().__init__(f"{kind.value}: {detail}")
        self.kind = kind


class CfiViolation(Exception):
    pass


class StackUnderflow(CfiViolation):
    pass


class PimFull(Exception):
    pass


class GcsStoreFault(Exception):
    def __init__(self, fault):
        super().__init__(f"GCS store faulted: {fault}")
        self.fault = fault


@dataclass(frozen=True)
class PimEntry:
    fn_addr: int
    type_id: int

    def __post_init__(self):
        if self.fn_addr >> ADDR_BITS:
            raise ValueError("PIM entries store 48-bit addresses")


@dataclass
class PimRegion:
    base: int
    capacity: int = DEFAULT_PIM_CAPACITY
    next_slot: int = 0
    entries: List[PimEntry] = field(default_factory=list)

    def slot_addr(self, index: int) -> int:
        return self.base + index * PIM_ENTRY_BYTES

    @property
    def n_pages(self) -> int:
        return -(-self.capacity * PIM_ENTRY_BYTES // 4096)


class ThreadCpi:
    """Per-thread CPI runtime bound to one core and one address space.

    With ``machine=None`` the PIM and shadow stack are pure bookkeeping,
    which is what the fuzz and property tests use.
    """

    def __init__(self, pim: PimRegion, machine: Optional[Machine] = None,
                 core: Optional[CoreState] = None, aspace: Optional[AddressSpace] = None,
                 costs: Optional[CostModel] = None, gcs_base: int = 0):
        self.pim = pim
        self.machine = machine
        self.core = core
        self.aspace = aspace
        self.costs = costs or CostModel()
        self.cycles = 0.0
        self.gcs_base = gcs_base
        self.shadow: List[int] = []

    def _gcs_store(self, vaddr: int, value: int) -> None:
        if self.machine is None:
            return
        fault = self.machine.store(self.core, self.aspace, vaddr, value,
                                   kind=AccessKind.GCS_STORE, mode=Mode.USER)
        if fault is not None:
            raise GcsStoreFault(fault)

    def _valid_tag(self, value: int) -> bool:
        idx = tag_index(value)
        if idx == INDEX_SENTINEL or idx >= self.pim.next_slot:
            return False
        return self.pim.entries[idx].fn_addr == untag(value)

    def backup(self, fn_ptr: int, signature: str) -> int:
        """Back up a code pointer and return it tagged with its PIM slot.

        Pointers that already carry a live index for the same address are
        returned unchanged.
        """
        self.cycles += self.costs.ptr_backup
        if self._valid_tag(fn_ptr):
            entry = self.pim.entries[tag_index(fn_ptr)]
            if entry.type_id == type_id(signature):
                return fn_ptr
        pim = self.pim
        if pim.next_slot >= pim.capacity:
            raise PimFull(f"PIM full at {pim.capacity} slots")
        entry = PimEntry(untag(fn_ptr), type_id(signature))
        slot = pim.slot_addr(pim.next_slot)
        self._gcs_store(slot, entry.fn_addr)
        self._gcs_store(slot + 8, entry.type_id)
        pim.entries.append(entry)
        pim.next_slot += 1
        return tag(entry.fn_addr, pim.next_slot - 1)

    def check(self, value: int, expected_signature: str) -> int:
        """Verify a tagged pointer before an indirect call; return the target."""
        self.cycles += self.costs.ptr_check
        idx = tag_index(value)
        if idx == INDEX_SENTINEL or idx >= self.pim.next_slot:
            raise CpiViolation(ViolationKind.OUT_OF_RANGE, f"index {idx:#x}")
        entry = self.pim.entries[idx]
        if entry.fn_addr != untag(value):
            raise CpiViolation(ViolationKind.ADDR_MISMATCH,
                               f"{untag(value):#x} != backup {entry.fn_addr:#x}")
        if entry.type_id != type_id(expected_signature):
            raise CpiViolation(ViolationKind.TYPE_MISMATCH, f"slot {idx} type differs")
        return entry.fn_addr

    def load_globals(self, segment) -> List[int]:
        """Copy the global code-pointer segment into the PIM at load time.

        ``segment`` is a list of ``(name, fn_addr, signature)``; returns the
        tagged values to patch into the globals.
        """
        return [self.backup(untagged(addr), sig) for _, addr, sig in segment]

    # guarded control stack

    def gcs_push(self, ret_addr: int) -> None:
        if self.core is not None and not self.core.features.gcs_on:
            return
        self._gcs_store(self.gcs_base - 8 * (len(self.shadow) + 1), ret_addr)
        self.shadow.append(ret_addr)

    def gcs_ret(self, lr: int) -> int:
        if self.core is not None and not self.core.features.gcs_on:
            return lr
        if not self.shadow:
            raise StackUnderflow("return with an empty guarded control stack")
        expected = self.shadow.pop()
        if expected != lr:
            raise CfiViolation(f"return to {lr:#x}, shadow stack holds {expected:#x}")
        return lr
